//! Sets of `M` linear MDPs over shared state and action spaces.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{anchor_measures, generate_linear_mdp, sample_simplex, LinearMdpSpec};
use super::validate::{ValidationReport, Violation, ViolationKind};
use crate::error::{invalid, Result};
use crate::rng::{self, domain};

/// Singular values of the context Gram below this count as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Attempts at redrawing context measures before giving up on a rank target.
const RANK_RETRIES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Flavor {
    Homogeneous,
    SmallDeviation {
        xi: f64,
    },
    /// Agent features are `[c·φ(x,a); κ(m)]`; the last `context_dim`
    /// coordinates of every feature vector hold the agent's context.
    Contextual {
        context_dim: usize,
        target_rank: usize,
        contexts: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelEnvSet {
    pub agents: usize,
    pub specs: Vec<LinearMdpSpec>,
    pub flavor: Flavor,
}

/// Total-variation distance `½‖p − q‖₁`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl ParallelEnvSet {
    /// `M` copies of one spec.
    pub fn homogeneous(spec: LinearMdpSpec, agents: usize) -> Result<Self> {
        if agents == 0 {
            return Err(invalid("need at least one agent"));
        }
        spec.check_shapes()?;
        Ok(Self {
            agents,
            specs: vec![spec; agents],
            flavor: Flavor::Homogeneous,
        })
    }

    pub fn num_states(&self) -> usize {
        self.specs[0].num_states
    }

    pub fn num_actions(&self) -> usize {
        self.specs[0].num_actions
    }

    pub fn horizon(&self) -> usize {
        self.specs[0].horizon
    }

    /// Learner-side feature dimension (`d`, or `d + k` for contexts).
    pub fn feat_dim(&self) -> usize {
        self.specs[0].feat_dim
    }

    pub fn context_dim(&self) -> usize {
        match &self.flavor {
            Flavor::Contextual { context_dim, .. } => *context_dim,
            _ => 0,
        }
    }

    pub fn xi(&self) -> f64 {
        match &self.flavor {
            Flavor::SmallDeviation { xi } => *xi,
            _ => 0.0,
        }
    }

    /// Largest pairwise transition TV and reward gap over all `(h, x, a)`.
    pub fn max_pairwise_deviation(&self) -> (f64, f64) {
        let (mut tv, mut gap) = (0.0f64, 0.0f64);
        let (s, a, hz) = (self.num_states(), self.num_actions(), self.horizon());
        for h in 0..hz {
            for x in 0..s {
                for u in 0..a {
                    let rows: Vec<Vec<f64>> =
                        self.specs.iter().map(|sp| sp.transition_row(h, x, u)).collect();
                    let rewards: Vec<f64> = self.specs.iter().map(|sp| sp.reward(h, x, u)).collect();
                    for i in 0..self.agents {
                        for j in i + 1..self.agents {
                            tv = tv.max(total_variation(&rows[i], &rows[j]));
                            gap = gap.max((rewards[i] - rewards[j]).abs());
                        }
                    }
                }
            }
        }
        (tv, gap)
    }

    /// Gram matrix of projected contexts at step `h`.
    ///
    /// Each agent's context is mapped through the context block of the step's
    /// measures and reward weights, `g_h(m) = [ν_h | α_h]ᵀ κ(m)`, and the
    /// matrix returned is `K_h[m, m'] = ⟨g_h(m), g_h(m')⟩`.
    pub fn context_gram(&self, h: usize) -> Result<DMatrix<f64>> {
        let Flavor::Contextual { context_dim, contexts, .. } = &self.flavor else {
            return Err(invalid("context Gram needs a contextual set"));
        };
        if h >= self.horizon() {
            return Err(invalid(format!("step {h} out of range")));
        }
        let spec = &self.specs[0];
        let base = spec.feat_dim - context_dim;
        let s = spec.num_states;
        let mut g = DMatrix::<f64>::zeros(self.agents, s + 1);
        for (m, kappa) in contexts.iter().enumerate() {
            for (j, kj) in kappa.iter().enumerate() {
                for x in 0..s {
                    g[(m, x)] += kj * spec.measures[h][base + j][x];
                }
                g[(m, s)] += kj * spec.reward_weights[h][base + j];
            }
        }
        Ok(&g * g.transpose())
    }

    /// Numerical rank of the context Gram at step `h`.
    pub fn heterogeneity_rank(&self, h: usize) -> Result<usize> {
        Ok(numerical_rank(&self.context_gram(h)?, RANK_CUTOFF))
    }

    /// Largest context-Gram rank over steps; zero for non-contextual sets.
    pub fn heterogeneity(&self) -> Result<usize> {
        if !matches!(self.flavor, Flavor::Contextual { .. }) {
            return Ok(0);
        }
        (0..self.horizon()).try_fold(0, |acc, h| Ok(acc.max(self.heterogeneity_rank(h)?)))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.agents == 0 || self.specs.len() != self.agents {
            report.push(Violation::new(
                ViolationKind::Shape,
                "agent count does not match the number of specs",
                self.specs.len() as f64,
            ));
            return report;
        }
        let first = &self.specs[0];
        for (m, spec) in self.specs.iter().enumerate() {
            report.absorb(spec.validate(), Some(m));
            if (spec.num_states, spec.num_actions, spec.horizon, spec.feat_dim)
                != (first.num_states, first.num_actions, first.horizon, first.feat_dim)
            {
                report.push(
                    Violation::new(ViolationKind::Consistency, "agent sizes differ", f64::NAN)
                        .for_agent(m),
                );
            }
        }
        if !report.is_valid() {
            return report;
        }
        match &self.flavor {
            Flavor::Homogeneous => {
                for (m, spec) in self.specs.iter().enumerate().skip(1) {
                    if spec != first {
                        report.push(
                            Violation::new(ViolationKind::Flavor, "homogeneous specs differ", f64::NAN)
                                .for_agent(m),
                        );
                    }
                }
            }
            Flavor::SmallDeviation { xi } => {
                let (tv, gap) = self.max_pairwise_deviation();
                if tv > xi + 1e-12 {
                    report.push(Violation::new(ViolationKind::Flavor, "pairwise TV exceeds ξ", tv));
                }
                if gap > xi + 1e-12 {
                    report.push(Violation::new(ViolationKind::Flavor, "pairwise reward gap exceeds ξ", gap));
                }
            }
            Flavor::Contextual { context_dim, target_rank, contexts } => {
                let base = first.feat_dim.saturating_sub(*context_dim);
                if contexts.len() != self.agents || contexts.iter().any(|c| c.len() != *context_dim) {
                    report.push(Violation::new(ViolationKind::Shape, "context table shape mismatch", f64::NAN));
                    return report;
                }
                for (m, spec) in self.specs.iter().enumerate() {
                    let shared_ok = spec.measures.iter().zip(&first.measures).all(|(a, b)| a == b)
                        && spec.reward_weights == first.reward_weights;
                    let context_ok = spec
                        .features
                        .iter()
                        .zip(&first.features)
                        .all(|(f, g)| f[..base] == g[..base] && f[base..] == contexts[m][..]);
                    if !shared_ok || !context_ok {
                        report.push(
                            Violation::new(
                                ViolationKind::Flavor,
                                "spec does not decompose into shared and context parts",
                                f64::NAN,
                            )
                            .for_agent(m),
                        );
                    }
                }
                for h in 0..first.horizon {
                    match self.heterogeneity_rank(h) {
                        Ok(r) if r == *target_rank => {}
                        Ok(r) => report.push(
                            Violation::new(ViolationKind::Flavor, "context Gram rank differs from target", r as f64)
                                .at_step(h),
                        ),
                        Err(e) => report.push(Violation::new(ViolationKind::Flavor, e.to_string(), f64::NAN)),
                    }
                }
            }
        }
        report
    }
}

/// Rank counted as singular values above `cutoff`.
pub fn numerical_rank(m: &DMatrix<f64>, cutoff: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|s| **s > cutoff)
        .count()
}

/// Mixes a base spec with agent-specific components.
///
/// Agent `m` gets measures `(1 − ξ/2)·μ + (ξ/2)·μ'_m` and reward weights
/// `(1 − ξ/2)·θ + (ξ/2)·θ'_m`, where `μ'_m` rows are fresh distributions and
/// `θ'_m ∈ [0,1]^d`. With simplex features any two agents' kernels differ by
/// at most `ξ/2` in total variation and rewards by at most `ξ/2`.
pub fn perturb_small_deviation(spec: &LinearMdpSpec, xi: f64, agents: usize, seed: u64) -> Result<ParallelEnvSet> {
    if !(0.0..1.0).contains(&xi) {
        return Err(invalid(format!("ξ = {xi} must lie in [0, 1)")));
    }
    if agents == 0 {
        return Err(invalid("need at least one agent"));
    }
    spec.check_shapes()?;
    if xi == 0.0 {
        return ParallelEnvSet::homogeneous(spec.clone(), agents);
    }
    let simplex = spec
        .features
        .iter()
        .all(|f| f.iter().all(|v| *v >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    if !simplex {
        return Err(invalid("small-deviation perturbation needs simplex-valued features"));
    }
    let keep = 1.0 - xi / 2.0;
    let mix = xi / 2.0;
    let mut specs = Vec::with_capacity(agents);
    for m in 0..agents {
        let mut rng = rng::keyed(seed, &[domain::PERTURB, m as u64]);
        let mut agent = spec.clone();
        for h in 0..spec.horizon {
            let fresh = anchor_measures(&mut rng, spec.feat_dim, spec.num_states);
            for (row, noise) in agent.measures[h].iter_mut().zip(fresh) {
                for (v, n) in row.iter_mut().zip(noise) {
                    *v = keep * *v + mix * n;
                }
            }
            for v in agent.reward_weights[h].iter_mut() {
                *v = keep * *v + mix * rng.random::<f64>();
            }
        }
        specs.push(agent);
    }
    Ok(ParallelEnvSet {
        agents,
        specs,
        flavor: Flavor::SmallDeviation { xi },
    })
}

/// Sizes for [`build_contextual_set`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Dimension of the shared feature map.
    pub base_dim: usize,
    pub context_dim: usize,
    pub agents: usize,
    pub target_rank: usize,
}

/// Builds agents whose MDPs differ only through a context vector.
///
/// Agent features are `[c·φ(x,a); κ(m)]` with `c = 1/2` (or 1 without
/// contexts), measures are `[μ_h; ν_h]` and reward weights `[θ_h; α_h]`. The
/// contexts are `(1 − c)`-scaled convex combinations of the first
/// `target_rank` unit vectors: the first `target_rank` agents take the pure
/// vertices and the others random mixtures, so the contexts span exactly a
/// `target_rank`-dimensional subspace.
pub fn build_contextual_set(shape: ContextualShape, seed: u64) -> Result<ParallelEnvSet> {
    let ContextualShape { num_states, num_actions, horizon, base_dim, context_dim: k, agents, target_rank: chi } = shape;
    if agents == 0 {
        return Err(invalid("need at least one agent"));
    }
    if chi > k.min(agents) || chi > num_states + 1 {
        return Err(invalid(format!(
            "rank {chi} infeasible with context_dim {k}, {agents} agents and {num_states} states"
        )));
    }
    if (chi == 0) != (k == 0) {
        return Err(invalid("rank 0 is possible only without contexts"));
    }
    let base = generate_linear_mdp(num_states, num_actions, horizon, base_dim, seed)?;
    let c = if k == 0 { 1.0 } else { 0.5 };
    let mut rng = rng::keyed(seed, &[domain::CONTEXT]);
    let contexts: Vec<Vec<f64>> = (0..agents)
        .map(|m| {
            let mut kappa = vec![0.0; k];
            if chi > 0 {
                let weights = if m < chi {
                    let mut e = vec![0.0; chi];
                    e[m] = 1.0;
                    e
                } else {
                    sample_simplex(&mut rng, chi, 1.0)
                };
                for (slot, w) in kappa.iter_mut().zip(weights) {
                    *slot = (1.0 - c) * w;
                }
            }
            kappa
        })
        .collect();
    for _ in 0..RANK_RETRIES {
        let context_measures: Vec<Vec<Vec<f64>>> =
            (0..horizon).map(|_| anchor_measures(&mut rng, k, num_states)).collect();
        let context_rewards: Vec<Vec<f64>> =
            (0..horizon).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
        let mut specs = Vec::with_capacity(agents);
        for kappa in &contexts {
            let features = base
                .features
                .iter()
                .map(|f| f.iter().map(|v| c * v).chain(kappa.iter().copied()).collect())
                .collect();
            let measures = base
                .measures
                .iter()
                .zip(&context_measures)
                .map(|(mu, nu)| mu.iter().chain(nu).cloned().collect())
                .collect();
            let reward_weights = base
                .reward_weights
                .iter()
                .zip(&context_rewards)
                .map(|(theta, alpha)| theta.iter().chain(alpha).copied().collect())
                .collect();
            specs.push(LinearMdpSpec {
                num_states,
                num_actions,
                horizon,
                feat_dim: base_dim + k,
                features,
                measures,
                reward_weights,
            });
        }
        let set = ParallelEnvSet {
            agents,
            specs,
            flavor: Flavor::Contextual { context_dim: k, target_rank: chi, contexts: contexts.clone() },
        };
        let ranks_ok = (0..horizon).all(|h| set.heterogeneity_rank(h).map(|r| r == chi).unwrap_or(false));
        if ranks_ok {
            return Ok(set);
        }
    }
    Err(invalid(format!("could not reach context rank {chi} after {RANK_RETRIES} draws")))
}
