//! Linear multi-agent MDPs over explicit joint state and action spaces.
//!
//! Column `m` of the stacked feature `Φ(x,a) ∈ R^{d×M}` is `[φ_m(x,a); φ_c(x,a)]`
//! with `d = d₁ + d₂`. Agent `m` earns `φ_mᵀθ_h` and the shared kernel is
//! `φ_cᵀμ_h`. Joint indices are mixed-radix with agent 0 most significant.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{anchor_measures, check_reward, check_row, dot, simplex_features};
use super::tabular::{sample_categorical, DpSolution, Policy, TabularMdp, ValueTable};
use super::validate::{ValidationReport, Violation, ViolationKind};
use crate::error::{invalid, Result};
use crate::rng::{self, domain};

/// Default cap on joint `|S|·|A|`.
pub const JOINT_BUDGET: usize = 4096;

/// Margin for values that compare as strictly better.
pub const PARETO_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpSpec {
    pub agents: usize,
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub horizon: usize,
    pub reward_feat_dim: usize,
    pub trans_feat_dim: usize,
    /// `reward_features[m][z]` with `z = x * |A| + a` over joint indices.
    pub reward_features: Vec<Vec<Vec<f64>>>,
    /// `common_features[z]`.
    pub common_features: Vec<Vec<f64>>,
    /// `reward_weights[h]`, length `d₁`.
    pub reward_weights: Vec<Vec<f64>>,
    /// `measures[h][i][x']`, `d₂` rows over joint next states.
    pub measures: Vec<Vec<Vec<f64>>>,
}

/// Mixed-radix encoding, first coordinate most significant.
pub fn encode_joint(parts: &[usize], sizes: &[usize]) -> usize {
    parts.iter().zip(sizes).fold(0, |acc, (p, s)| acc * s + p)
}

pub fn decode_joint(mut index: usize, sizes: &[usize]) -> Vec<usize> {
    let mut parts = vec![0; sizes.len()];
    for (slot, s) in parts.iter_mut().zip(sizes).rev() {
        *slot = index % s;
        index /= s;
    }
    parts
}

impl MmdpSpec {
    pub fn num_states(&self) -> usize {
        self.state_sizes.iter().product()
    }

    pub fn num_actions(&self) -> usize {
        self.action_sizes.iter().product()
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_actions()
    }

    /// `d = d₁ + d₂`, the rows of `Φ`.
    pub fn feat_dim(&self) -> usize {
        self.reward_feat_dim + self.trans_feat_dim
    }

    pub fn pair(&self, x: usize, a: usize) -> usize {
        x * self.num_actions() + a
    }

    /// The `d × M` stacked feature of pair `z`.
    pub fn phi_matrix(&self, z: usize) -> DMatrix<f64> {
        let (d1, d2) = (self.reward_feat_dim, self.trans_feat_dim);
        DMatrix::from_fn(d1 + d2, self.agents, |i, m| {
            if i < d1 {
                self.reward_features[m][z][i]
            } else {
                self.common_features[z][i - d1]
            }
        })
    }

    /// Stacked features for every joint pair.
    pub fn phi_matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.num_pairs()).map(|z| self.phi_matrix(z)).collect()
    }

    pub fn reward(&self, h: usize, m: usize, x: usize, a: usize) -> f64 {
        dot(&self.reward_features[m][self.pair(x, a)], &self.reward_weights[h])
    }

    pub fn rewards(&self, h: usize, x: usize, a: usize) -> Vec<f64> {
        (0..self.agents).map(|m| self.reward(h, m, x, a)).collect()
    }

    pub fn transition_row(&self, h: usize, x: usize, a: usize) -> Vec<f64> {
        let phi = &self.common_features[self.pair(x, a)];
        let mut row = vec![0.0; self.num_states()];
        for (w, measure) in phi.iter().zip(&self.measures[h]) {
            for (r, v) in row.iter_mut().zip(measure) {
                *r += w * v;
            }
        }
        row
    }

    fn check_shapes(&self) -> Result<()> {
        let m = self.agents;
        if m == 0 || self.state_sizes.len() != m || self.action_sizes.len() != m {
            return Err(invalid("per-agent size lists must have one entry per agent"));
        }
        if self.state_sizes.iter().chain(&self.action_sizes).any(|s| *s == 0) || self.horizon == 0 {
            return Err(invalid("MMDP sizes must be positive"));
        }
        if self.trans_feat_dim == 0 {
            return Err(invalid("transition feature dimension must be positive"));
        }
        let (z, d1, d2, s) = (self.num_pairs(), self.reward_feat_dim, self.trans_feat_dim, self.num_states());
        if self.reward_features.len() != m
            || self.reward_features.iter().any(|t| t.len() != z || t.iter().any(|f| f.len() != d1))
        {
            return Err(invalid("reward feature table shape mismatch"));
        }
        if self.common_features.len() != z || self.common_features.iter().any(|f| f.len() != d2) {
            return Err(invalid("common feature table shape mismatch"));
        }
        if self.reward_weights.len() != self.horizon || self.reward_weights.iter().any(|w| w.len() != d1) {
            return Err(invalid("reward weight shape mismatch"));
        }
        if self.measures.len() != self.horizon
            || self.measures.iter().any(|mu| mu.len() != d2 || mu.iter().any(|r| r.len() != s))
        {
            return Err(invalid("measure table shape mismatch"));
        }
        Ok(())
    }

    /// Lists every violated invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if let Err(e) = self.check_shapes() {
            report.push(Violation::new(ViolationKind::Shape, e.to_string(), f64::NAN));
            return report;
        }
        let a_n = self.num_actions();
        for z in 0..self.num_pairs() {
            let phi = self.phi_matrix(z);
            let spectral = phi.singular_values().max();
            if spectral > 1.0 + 1e-9 {
                report.push(
                    Violation::new(ViolationKind::FeatureNorm, "‖Φ(x,a)‖₂ > 1", spectral).at_pair(z / a_n, z % a_n),
                );
            }
        }
        for h in 0..self.horizon {
            for x in 0..self.num_states() {
                for a in 0..a_n {
                    check_row(&mut report, h, x, a, &self.transition_row(h, x, a));
                    for m in 0..self.agents {
                        check_reward(&mut report, h, x, a, Some(m), self.reward(h, m, x, a));
                    }
                }
            }
        }
        report
    }

    /// Shared-dynamics tables, one reward table per agent.
    pub fn joint_model(&self) -> Result<JointModel> {
        self.check_shapes()?;
        let (s, a_n) = (self.num_states(), self.num_actions());
        let transitions = (0..self.horizon)
            .map(|h| {
                (0..s)
                    .flat_map(|x| (0..a_n).map(move |a| (x, a)))
                    .map(|(x, a)| self.transition_row(h, x, a))
                    .collect()
            })
            .collect();
        let agent_rewards: Vec<Vec<Vec<f64>>> = (0..self.agents)
            .map(|m| {
                (0..self.horizon)
                    .map(|h| (0..self.num_pairs()).map(|z| dot(&self.reward_features[m][z], &self.reward_weights[h])).collect())
                    .collect()
            })
            .collect();
        let zero = vec![vec![0.0; self.num_pairs()]; self.horizon];
        let dynamics = TabularMdp::new(s, a_n, self.horizon, zero, transitions)?;
        Ok(JointModel { dynamics, agent_rewards })
    }

    /// One joint transition: every agent's reward and the joint next state.
    pub fn step<R: Rng + ?Sized>(&self, x: usize, a: usize, h: usize, rng: &mut R) -> Result<(Vec<f64>, usize)> {
        if h >= self.horizon || x >= self.num_states() || a >= self.num_actions() {
            return Err(invalid(format!("(h={h}, x={x}, a={a}) out of range")));
        }
        let u: f64 = rng.random();
        Ok((self.rewards(h, x, a), sample_categorical(&self.transition_row(h, x, a), u)))
    }
}

/// Tabulated MMDP: shared dynamics plus per-agent rewards `[m][h][z]`.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub dynamics: TabularMdp,
    pub agent_rewards: Vec<Vec<Vec<f64>>>,
}

impl JointModel {
    pub fn agents(&self) -> usize {
        self.agent_rewards.len()
    }

    /// The single-objective MDP with reward `υᵀr_h`.
    pub fn scalarized(&self, upsilon: &[f64]) -> Result<TabularMdp> {
        check_simplex(upsilon, self.agents())?;
        let horizon = self.dynamics.horizon();
        let pairs = self.dynamics.num_states() * self.dynamics.num_actions();
        let rewards = (0..horizon)
            .map(|h| {
                (0..pairs)
                    .map(|z| upsilon.iter().zip(&self.agent_rewards).map(|(u, r)| u * r[h][z]).sum())
                    .collect()
            })
            .collect();
        self.dynamics.with_rewards(rewards)
    }

    /// Agent `m`'s own-reward MDP.
    pub fn agent_mdp(&self, m: usize) -> Result<TabularMdp> {
        let rewards = self.agent_rewards.get(m).ok_or_else(|| invalid(format!("agent {m} out of range")))?;
        self.dynamics.with_rewards(rewards.clone())
    }

    /// Per-agent value tables of one joint policy.
    pub fn evaluate_vector(&self, policy: &Policy) -> Result<Vec<ValueTable>> {
        policy.check(self.dynamics.num_states(), self.dynamics.num_actions(), self.dynamics.horizon())?;
        (0..self.agents()).map(|m| Ok(self.agent_mdp(m)?.evaluate_unchecked(policy))).collect()
    }
}

pub(crate) fn check_simplex(upsilon: &[f64], agents: usize) -> Result<()> {
    if upsilon.len() != agents {
        return Err(invalid(format!("scalarization has {} entries for {agents} agents", upsilon.len())));
    }
    if upsilon.iter().any(|u| !u.is_finite() || *u < 0.0) || (upsilon.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("scalarization must lie on the probability simplex"));
    }
    Ok(())
}

/// Sizes for [`generate_mmdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpShape {
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub horizon: usize,
    pub reward_feat_dim: usize,
    pub trans_feat_dim: usize,
    /// Give every agent the same reward features.
    pub cooperative: bool,
    pub budget: usize,
}

impl MmdpShape {
    pub fn new(state_sizes: Vec<usize>, action_sizes: Vec<usize>, horizon: usize, d1: usize, d2: usize) -> Self {
        Self {
            state_sizes,
            action_sizes,
            horizon,
            reward_feat_dim: d1,
            trans_feat_dim: d2,
            cooperative: false,
            budget: JOINT_BUDGET,
        }
    }
}

/// Generates an MMDP that is valid by construction.
///
/// Both `φ_c` and every `φ_m` are simplex points scaled by `1/√(2M)`, which
/// keeps the Frobenius norm of `Φ` at most one. Measure rows are anchor
/// distributions divided by the same scale, so `φ_cᵀμ_h` is still a convex
/// combination of distributions, and rewards land in `[0, 1/√(2M)]`.
pub fn generate_mmdp(shape: &MmdpShape, seed: u64) -> Result<MmdpSpec> {
    let m = shape.state_sizes.len();
    if m == 0 || shape.action_sizes.len() != m {
        return Err(invalid("need matching non-empty per-agent state and action sizes"));
    }
    if shape.state_sizes.iter().chain(&shape.action_sizes).any(|s| *s == 0) || shape.horizon == 0 {
        return Err(invalid("MMDP sizes must be positive"));
    }
    let joint_states = shape.state_sizes.iter().try_fold(1usize, |acc, s| acc.checked_mul(*s));
    let joint_actions = shape.action_sizes.iter().try_fold(1usize, |acc, s| acc.checked_mul(*s));
    let pairs = match (joint_states, joint_actions) {
        (Some(s), Some(a)) => s.checked_mul(a),
        _ => None,
    };
    let Some(pairs) = pairs.filter(|p| *p <= shape.budget) else {
        return Err(invalid(format!("joint |S|·|A| exceeds the budget of {}", shape.budget)));
    };
    let num_states = joint_states.unwrap_or(0);
    let (d1, d2) = (shape.reward_feat_dim, shape.trans_feat_dim);
    if d1 == 0 || d2 == 0 || d1 > pairs || d2 > pairs {
        return Err(invalid(format!("feature dimensions ({d1}, {d2}) must lie in [1, {pairs}]")));
    }
    let scale = 1.0 / (2.0 * m as f64).sqrt();
    let mut rng = rng::keyed(seed, &[domain::GENERATE]);
    let scaled = |table: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        table.into_iter().map(|f| f.into_iter().map(|v| v * scale).collect()).collect()
    };
    let common_features = scaled(simplex_features(&mut rng, pairs, d2));
    let reward_features = if shape.cooperative {
        vec![scaled(simplex_features(&mut rng, pairs, d1)); m]
    } else {
        (0..m).map(|_| scaled(simplex_features(&mut rng, pairs, d1))).collect()
    };
    let measures = (0..shape.horizon)
        .map(|_| {
            anchor_measures(&mut rng, d2, num_states)
                .into_iter()
                .map(|row| row.into_iter().map(|v| v / scale).collect())
                .collect()
        })
        .collect();
    let reward_weights = (0..shape.horizon).map(|_| (0..d1).map(|_| rng.random::<f64>()).collect()).collect();
    Ok(MmdpSpec {
        agents: m,
        state_sizes: shape.state_sizes.clone(),
        action_sizes: shape.action_sizes.clone(),
        horizon: shape.horizon,
        reward_feat_dim: d1,
        trans_feat_dim: d2,
        reward_features,
        common_features,
        reward_weights,
        measures,
    })
}

/// Backward induction on the joint MDP with reward `υᵀr_h`.
pub fn exact_scalarized_q_star(mmdp: &MmdpSpec, upsilon: &[f64]) -> Result<DpSolution> {
    Ok(mmdp.joint_model()?.scalarized(upsilon)?.solve())
}

/// `a` Pareto-dominates `b`: no worse anywhere, better somewhere by more
/// than [`PARETO_MARGIN`].
pub fn pareto_dominates(a: &[f64], b: &[f64]) -> bool {
    let no_worse = a.iter().zip(b).all(|(x, y)| *x >= *y - PARETO_MARGIN);
    let better = a.iter().zip(b).any(|(x, y)| *x > *y + PARETO_MARGIN);
    no_worse && better
}

/// Flattened first-step values `[m][x]` of a joint policy.
pub fn start_value_vector(values: &[ValueTable]) -> Vec<f64> {
    values.iter().flat_map(|v| v[0].iter().copied()).collect()
}

/// Every deterministic joint policy, decoded from `0..|A|^{|S|·H}`.
pub fn enumerate_policies(num_states: usize, num_actions: usize, horizon: usize) -> Result<Vec<Policy>> {
    let cells = num_states * horizon;
    let total = (num_actions as u64)
        .checked_pow(cells as u32)
        .filter(|t| *t <= 1 << 20)
        .ok_or_else(|| invalid("too many policies to enumerate"))?;
    Ok((0..total)
        .map(|code| {
            let mut c = code;
            let mut policy = Policy::constant(horizon, num_states, 0);
            for h in 0..horizon {
                for x in 0..num_states {
                    policy.actions[h][x] = (c % num_actions as u64) as usize;
                    c /= num_actions as u64;
                }
            }
            policy
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> MmdpSpec {
        generate_mmdp(&MmdpShape::new(vec![2, 2], vec![2, 2], 2, 2, 3), seed).unwrap()
    }

    #[test]
    fn joint_encoding_round_trips() {
        let sizes = [3, 2, 4];
        for i in 0..24 {
            assert_eq!(encode_joint(&decode_joint(i, &sizes), &sizes), i);
        }
        assert_eq!(decode_joint(4, &sizes), vec![0, 1, 0]);
    }

    #[test]
    fn generated_mmdps_validate() {
        for seed in 0..50 {
            let spec = generate_mmdp(&MmdpShape::new(vec![2, 3], vec![2, 1], 3, 3, 2), seed).unwrap();
            let report = spec.validate();
            assert!(report.is_valid(), "seed {seed}: {report:?}");
            assert_eq!(spec, generate_mmdp(&MmdpShape::new(vec![2, 3], vec![2, 1], 3, 3, 2), seed).unwrap());
        }
    }

    #[test]
    fn budget_is_enforced() {
        let shape = MmdpShape::new(vec![8, 8], vec![8, 9], 1, 2, 2);
        assert!(generate_mmdp(&shape, 0).is_err());
    }

    #[test]
    fn cooperative_rewards_coincide() {
        let mut shape = MmdpShape::new(vec![2, 2], vec![2, 2], 2, 3, 2);
        shape.cooperative = true;
        let spec = generate_mmdp(&shape, 4).unwrap();
        for h in 0..2 {
            for x in 0..4 {
                for a in 0..4 {
                    let r = spec.rewards(h, x, a);
                    assert_eq!(r[0], r[1]);
                }
            }
        }
    }

    #[test]
    fn point_mass_scalarization_is_single_objective() {
        let spec = tiny(2);
        let model = spec.joint_model().unwrap();
        for m in 0..2 {
            let mut e = vec![0.0; 2];
            e[m] = 1.0;
            let scal = exact_scalarized_q_star(&spec, &e).unwrap();
            let own = model.agent_mdp(m).unwrap().solve();
            assert_eq!(scal.v_star, own.v_star);
        }
    }

    #[test]
    fn invalid_scalarization_is_rejected() {
        let spec = tiny(2);
        assert!(exact_scalarized_q_star(&spec, &[0.7, 0.7]).is_err());
        assert!(exact_scalarized_q_star(&spec, &[1.0]).is_err());
        assert!(exact_scalarized_q_star(&spec, &[1.2, -0.2]).is_err());
    }

    #[test]
    fn scalarized_optimum_matches_enumeration() {
        let spec = tiny(3);
        let model = spec.joint_model().unwrap();
        let upsilon = [0.3, 0.7];
        let sol = exact_scalarized_q_star(&spec, &upsilon).unwrap();
        let scal = model.scalarized(&upsilon).unwrap();
        let mut best = [f64::NEG_INFINITY; 4];
        for policy in enumerate_policies(4, 4, 2).unwrap() {
            let v = scal.evaluate(&policy).unwrap();
            for x in 0..4 {
                best[x] = best[x].max(v[0][x]);
            }
        }
        for x in 0..4 {
            assert!((sol.v_star[0][x] - best[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn scalarized_values_are_lipschitz() {
        let spec = tiny(6);
        let u = [0.2, 0.8];
        let w = [0.65, 0.35];
        let a = exact_scalarized_q_star(&spec, &u).unwrap();
        let b = exact_scalarized_q_star(&spec, &w).unwrap();
        let l1: f64 = u.iter().zip(&w).map(|(p, q)| (p - q).abs()).sum();
        for x in 0..4 {
            assert!((a.v_star[0][x] - b.v_star[0][x]).abs() <= 2.0 * 2.0 * l1 + 1e-12);
        }
    }

    #[test]
    fn scalarized_greedy_is_not_dominated() {
        let spec = tiny(7);
        let model = spec.joint_model().unwrap();
        let vectors: Vec<Vec<f64>> = enumerate_policies(4, 4, 2)
            .unwrap()
            .iter()
            .map(|p| start_value_vector(&model.evaluate_vector(p).unwrap()))
            .collect();
        for upsilon in [[0.5, 0.5], [0.1, 0.9], [0.8, 0.2]] {
            let sol = exact_scalarized_q_star(&spec, &upsilon).unwrap();
            let mine = start_value_vector(&model.evaluate_vector(&sol.greedy).unwrap());
            assert!(vectors.iter().all(|v| !pareto_dominates(v, &mine)));
        }
    }

    #[test]
    fn dominance_needs_a_strict_gain() {
        assert!(pareto_dominates(&[1.0, 2.0], &[1.0, 1.0]));
        assert!(!pareto_dominates(&[1.0, 1.0], &[1.0, 1.0]));
        assert!(!pareto_dominates(&[2.0, 0.0], &[1.0, 1.0]));
        assert!(!pareto_dominates(&[1.0, 1.0 + 1e-12], &[1.0, 1.0]));
    }

    #[test]
    fn broken_phi_norm_is_reported() {
        let mut spec = tiny(1);
        spec.common_features[0].iter_mut().for_each(|v| *v *= 10.0);
        let report = spec.validate();
        assert!(report.count(ViolationKind::FeatureNorm) >= 1);
    }
}
