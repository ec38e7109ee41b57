//! Explicit linear MDPs: `P_h(·|x,a) = φ(x,a)ᵀμ_h`, `r_h(x,a) = φ(x,a)ᵀθ_h`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::tabular::{sample_categorical, DpSolution, Policy, TabularMdp, ValueTable};
use super::validate::{ValidationReport, Violation, ViolationKind};
use crate::error::{invalid, Result};
use crate::linalg::tolerance;
use crate::rng::{self, domain};

/// A finite linear MDP stored by its parameters. Steps are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub feat_dim: usize,
    /// `features[x * num_actions + a]`, each of length `feat_dim`.
    pub features: Vec<Vec<f64>>,
    /// `measures[h][i][x']`: row `i` is the `i`-th measure over next states.
    pub measures: Vec<Vec<Vec<f64>>>,
    /// `reward_weights[h]`, length `feat_dim`.
    pub reward_weights: Vec<Vec<f64>>,
}

impl LinearMdpSpec {
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn pair(&self, x: usize, a: usize) -> usize {
        x * self.num_actions + a
    }

    pub fn feature(&self, x: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.features[self.pair(x, a)])
    }

    /// All feature vectors in pair order.
    pub fn feature_vectors(&self) -> Vec<DVector<f64>> {
        self.features
            .iter()
            .map(|f| DVector::from_column_slice(f))
            .collect()
    }

    pub fn reward(&self, h: usize, x: usize, a: usize) -> f64 {
        dot(&self.features[self.pair(x, a)], &self.reward_weights[h])
    }

    pub fn transition_row(&self, h: usize, x: usize, a: usize) -> Vec<f64> {
        let phi = &self.features[self.pair(x, a)];
        let mut row = vec![0.0; self.num_states];
        for (w, measure) in phi.iter().zip(&self.measures[h]) {
            for (r, m) in row.iter_mut().zip(measure) {
                *r += w * m;
            }
        }
        row
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let d = self.feat_dim;
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 || d == 0 {
            return Err(invalid("linear MDP sizes must be positive"));
        }
        if self.features.len() != self.num_pairs() || self.features.iter().any(|f| f.len() != d) {
            return Err(invalid("feature table shape mismatch"));
        }
        if self.measures.len() != self.horizon
            || self.measures.iter().any(|m| {
                m.len() != d || m.iter().any(|row| row.len() != self.num_states)
            })
        {
            return Err(invalid("measure table shape mismatch"));
        }
        if self.reward_weights.len() != self.horizon
            || self.reward_weights.iter().any(|w| w.len() != d)
        {
            return Err(invalid("reward weight shape mismatch"));
        }
        Ok(())
    }

    /// Materializes reward and transition tables.
    pub fn tabulate(&self) -> Result<TabularMdp> {
        self.check_shapes()?;
        let mut rewards = Vec::with_capacity(self.horizon);
        let mut transitions = Vec::with_capacity(self.horizon);
        for h in 0..self.horizon {
            let mut r_h = Vec::with_capacity(self.num_pairs());
            let mut p_h = Vec::with_capacity(self.num_pairs());
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    r_h.push(self.reward(h, x, a));
                    p_h.push(self.transition_row(h, x, a));
                }
            }
            rewards.push(r_h);
            transitions.push(p_h);
        }
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            rewards,
            transitions,
        )
    }

    /// One environment transition; `h` is zero-based.
    pub fn step<R: Rng + ?Sized>(
        &self,
        x: usize,
        a: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<(f64, usize)> {
        if h >= self.horizon || x >= self.num_states || a >= self.num_actions {
            return Err(invalid(format!("(h={h}, x={x}, a={a}) out of range")));
        }
        let u: f64 = rng.random();
        Ok((
            self.reward(h, x, a),
            sample_categorical(&self.transition_row(h, x, a), u),
        ))
    }

    /// Lists every violated linear-MDP invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if let Err(e) = self.check_shapes() {
            report.push(Violation::new(ViolationKind::Shape, e.to_string(), f64::NAN));
            return report;
        }
        let d = self.feat_dim as f64;
        for x in 0..self.num_states {
            for a in 0..self.num_actions {
                let norm = norm(&self.features[self.pair(x, a)]);
                if norm > 1.0 + tolerance::FEATURE_NORM {
                    report.push(
                        Violation::new(ViolationKind::FeatureNorm, "‖φ(x,a)‖ > 1", norm)
                            .at_pair(x, a),
                    );
                }
            }
        }
        for h in 0..self.horizon {
            let masses: Vec<f64> = self.measures[h].iter().map(|m| m.iter().sum()).collect();
            let mass_norm = norm(&masses);
            if mass_norm > d.sqrt() + 1e-9 {
                report.push(
                    Violation::new(ViolationKind::MeasureNorm, "‖μ_h(S)‖ > √d", mass_norm)
                        .at_step(h),
                );
            }
            let theta_norm = norm(&self.reward_weights[h]);
            if theta_norm > d.sqrt() + 1e-9 {
                report.push(
                    Violation::new(ViolationKind::RewardWeightNorm, "‖θ_h‖ > √d", theta_norm)
                        .at_step(h),
                );
            }
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    check_row(&mut report, h, x, a, &self.transition_row(h, x, a));
                    check_reward(&mut report, h, x, a, None, self.reward(h, x, a));
                }
            }
        }
        report
    }
}

pub(crate) fn check_row(report: &mut ValidationReport, h: usize, x: usize, a: usize, row: &[f64]) {
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        report.push(
            Violation::new(ViolationKind::TransitionMass, "transition row does not sum to 1", total)
                .at_step(h)
                .at_pair(x, a),
        );
    }
    for (next, p) in row.iter().enumerate() {
        if *p < -1e-12 {
            report.push(
                Violation::new(ViolationKind::TransitionNegative, "negative transition probability", *p)
                    .at_step(h)
                    .at_pair(x, a)
                    .at_next_state(next),
            );
        }
    }
}

pub(crate) fn check_reward(
    report: &mut ValidationReport,
    h: usize,
    x: usize,
    a: usize,
    agent: Option<usize>,
    r: f64,
) {
    if !(-1e-12..=1.0 + 1e-12).contains(&r) {
        let mut v = Violation::new(ViolationKind::RewardRange, "reward outside [0, 1]", r)
            .at_step(h)
            .at_pair(x, a);
        v.agent = agent;
        report.push(v);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub(crate) fn sample_simplex<R: Rng + ?Sized>(rng: &mut R, len: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 && total.is_finite() {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        v = vec![1.0 / len as f64; len];
    }
    v
}

/// Simplex-valued features: `d` distinct pairs get the unit vertices, the
/// rest are uniform draws from the simplex.
pub(crate) fn simplex_features<R: Rng + ?Sized>(rng: &mut R, pairs: usize, d: usize) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..pairs).collect();
    for i in (1..pairs).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut features = vec![Vec::new(); pairs];
    for (rank, z) in order.into_iter().enumerate() {
        features[z] = if rank < d {
            let mut e = vec![0.0; d];
            e[rank] = 1.0;
            e
        } else {
            sample_simplex(rng, d, 1.0)
        };
    }
    features
}

/// Concentration of the anchor next-state distributions.
const ANCHOR_CONCENTRATION: f64 = 0.5;

pub(crate) fn anchor_measures<R: Rng + ?Sized>(rng: &mut R, rows: usize, num_states: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| sample_simplex(rng, num_states, ANCHOR_CONCENTRATION))
        .collect()
}

/// Generates a linear MDP that is valid by construction.
///
/// Features are points of the probability simplex, each measure row is a
/// distribution over next states, and reward weights lie in `[0, 1]^d`, so
/// every induced kernel row is a convex combination of distributions and every
/// reward is a convex combination of numbers in `[0, 1]`.
pub fn generate_linear_mdp(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    feat_dim: usize,
    seed: u64,
) -> Result<LinearMdpSpec> {
    if num_states == 0 || num_actions == 0 || horizon == 0 || feat_dim == 0 {
        return Err(invalid("all linear MDP sizes must be at least 1"));
    }
    if feat_dim > num_states * num_actions {
        return Err(invalid(format!(
            "feature dimension {feat_dim} exceeds |S|·|A| = {}",
            num_states * num_actions
        )));
    }
    let mut rng = rng::keyed(seed, &[domain::GENERATE]);
    let features = simplex_features(&mut rng, num_states * num_actions, feat_dim);
    let measures = (0..horizon)
        .map(|_| anchor_measures(&mut rng, feat_dim, num_states))
        .collect();
    let reward_weights = (0..horizon)
        .map(|_| (0..feat_dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    Ok(LinearMdpSpec {
        num_states,
        num_actions,
        horizon,
        feat_dim,
        features,
        measures,
        reward_weights,
    })
}

/// Backward induction on the tabulated model.
pub fn exact_q_star(spec: &LinearMdpSpec) -> Result<DpSolution> {
    Ok(spec.tabulate()?.solve())
}

/// Exact value of a deterministic policy.
pub fn evaluate_policy(spec: &LinearMdpSpec, policy: &Policy) -> Result<ValueTable> {
    spec.tabulate()?.evaluate(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_instance_is_a_point_mass() {
        let spec = generate_linear_mdp(1, 1, 1, 1, 0).unwrap();
        assert_eq!(spec.transition_row(0, 0, 0), vec![1.0]);
        assert!(spec.validate().is_valid());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_linear_mdp(5, 3, 3, 4, 42).unwrap();
        let b = generate_linear_mdp(5, 3, 3, 4, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_linear_mdp(5, 3, 3, 4, 43).unwrap());
    }

    #[test]
    fn generator_rejects_infeasible_dims() {
        assert!(generate_linear_mdp(2, 2, 1, 5, 0).is_err());
        assert!(generate_linear_mdp(0, 2, 1, 1, 0).is_err());
        assert!(generate_linear_mdp(2, 2, 0, 1, 0).is_err());
    }

    #[test]
    fn generated_specs_validate() {
        for seed in 0..200 {
            let s = 1 + (seed % 6) as usize;
            let a = 1 + (seed % 3) as usize;
            let d = 1 + (seed as usize * 7) % (s * a);
            let spec = generate_linear_mdp(s, a, 1 + (seed % 4) as usize, d, seed).unwrap();
            let report = spec.validate();
            assert!(report.is_valid(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn negated_measure_column_is_reported() {
        let mut spec = generate_linear_mdp(4, 2, 2, 3, 9).unwrap();
        let col = (0..4)
            .find(|x| spec.measures[1].iter().any(|row| row[*x] > 1e-6))
            .unwrap();
        for row in spec.measures[1].iter_mut() {
            row[col] = -row[col];
        }
        let report = spec.validate();
        assert!(!report.is_valid());
        assert!(report.violations.iter().any(|v| {
            v.kind == ViolationKind::TransitionNegative && v.h == Some(1) && v.next_state == Some(col)
        }));
    }

    #[test]
    fn scaled_reward_weights_are_reported() {
        let mut spec = generate_linear_mdp(4, 2, 2, 3, 10).unwrap();
        let tab = spec.tabulate().unwrap();
        let max_r = tab.rewards().iter().flatten().copied().fold(0.0, f64::max);
        assert!(max_r > 0.1);
        // Scale so that the largest reward becomes 0.9, then blow it up by 10.
        for w in spec.reward_weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= 0.9 / max_r);
        }
        assert!(spec.validate().is_valid());
        for w in spec.reward_weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= 10.0);
        }
        let report = spec.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::RewardRange));
    }

    #[test]
    fn step_on_point_mass_rows() {
        let spec = LinearMdpSpec {
            num_states: 3,
            num_actions: 1,
            horizon: 1,
            feat_dim: 1,
            features: vec![vec![1.0]; 3],
            measures: vec![vec![vec![0.0, 0.0, 1.0]]],
            reward_weights: vec![vec![0.25]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in 0..3 {
            assert_eq!(spec.step(x, 0, 0, &mut rng).unwrap(), (0.25, 2));
        }
        assert!(spec.step(3, 0, 0, &mut rng).is_err());
        assert!(spec.step(0, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn reward_matches_table() {
        let spec = generate_linear_mdp(4, 3, 2, 3, 5).unwrap();
        let tab = spec.tabulate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for h in 0..2 {
            for x in 0..4 {
                for a in 0..3 {
                    let (r, _) = spec.step(x, a, h, &mut rng).unwrap();
                    assert_eq!(r, tab.reward(h, x, a));
                }
            }
        }
    }

    #[test]
    fn empirical_next_state_frequencies() {
        let spec = generate_linear_mdp(4, 2, 1, 3, 77).unwrap();
        let row = spec.transition_row(0, 2, 1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..n {
            counts[spec.step(2, 1, 0, &mut rng).unwrap().1] += 1;
        }
        for (c, p) in counts.iter().zip(&row) {
            let freq = *c as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "freq {freq} vs p {p}");
        }
    }

    /// Brute force over all deterministic policies, valued by exact evaluation.
    fn brute_force_optimum(tab: &TabularMdp) -> Vec<f64> {
        let (s, a, h) = (tab.num_states(), tab.num_actions(), tab.horizon());
        let cells = s * h;
        let total = a.pow(cells as u32);
        let mut best = vec![f64::NEG_INFINITY; s];
        for code in 0..total {
            let mut c = code;
            let mut policy = Policy::constant(h, s, 0);
            for step in 0..h {
                for x in 0..s {
                    policy.actions[step][x] = c % a;
                    c /= a;
                }
            }
            let v = tab.evaluate(&policy).unwrap();
            for x in 0..s {
                best[x] = best[x].max(v[0][x]);
            }
        }
        best
    }

    #[test]
    fn dp_matches_policy_enumeration() {
        for seed in 0..5 {
            let spec = generate_linear_mdp(4, 2, 3, 3, 100 + seed).unwrap();
            let sol = exact_q_star(&spec).unwrap();
            let oracle = brute_force_optimum(&spec.tabulate().unwrap());
            for x in 0..4 {
                assert!((sol.v_star[0][x] - oracle[x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimal_values_are_bounded_by_remaining_steps() {
        for seed in 0..20 {
            let spec = generate_linear_mdp(5, 3, 4, 4, seed).unwrap();
            let sol = exact_q_star(&spec).unwrap();
            for h in 0..4 {
                for v in &sol.v_star[h] {
                    assert!(*v >= 0.0 && *v <= (4 - h) as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn policy_values_never_exceed_optimum() {
        let spec = generate_linear_mdp(5, 3, 3, 4, 8).unwrap();
        let sol = exact_q_star(&spec).unwrap();
        assert_eq!(evaluate_policy(&spec, &sol.greedy).unwrap(), sol.v_star);
        for a in 0..3 {
            let v = evaluate_policy(&spec, &Policy::constant(3, 5, a)).unwrap();
            for h in 0..3 {
                for x in 0..5 {
                    assert!(v[h][x] <= sol.v_star[h][x] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn reward_free_spec_has_zero_values() {
        let mut spec = generate_linear_mdp(3, 2, 3, 2, 4).unwrap();
        spec.reward_weights.iter_mut().for_each(|w| w.fill(0.0));
        // Uniform-random policy: average the per-action evaluations.
        for a in 0..2 {
            let v = evaluate_policy(&spec, &Policy::constant(3, 3, a)).unwrap();
            assert!(v.iter().flatten().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn monte_carlo_policy_value() {
        let spec = generate_linear_mdp(3, 2, 3, 2, 12).unwrap();
        let policy = Policy {
            actions: vec![vec![0, 1, 1], vec![1, 0, 1], vec![0, 0, 1]],
        };
        let exact = evaluate_policy(&spec, &policy).unwrap();
        let tab = spec.tabulate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = 0;
            let mut ret = 0.0;
            for h in 0..3 {
                let (r, next) = tab.step(h, x, policy.action(h, x), &mut rng).unwrap();
                ret += r;
                x = next;
            }
            sum += ret;
            sq += ret * ret;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact[0][0]).abs() <= 3.0 * se, "{mean} vs {}", exact[0][0]);
    }
}
