//! Cooperative LSVI for linear multi-agent MDPs: random scalarizations,
//! joint greedy acting and rarely-switching reward synchronization.

mod replica;
mod runner;

pub use replica::{act_joint_greedy, sync_rewards, JointLearnerState, JointPlan, JointRecord, RewardSyncReport};
pub use runner::{mmdp_beta, run_mmdp, run_mmdp_with, MmdpDiagnostics, MmdpEpisode, MmdpRunConfig, MmdpTrace};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::env::mmdp::check_simplex;
use crate::error::{invalid, Result};
use crate::rng::{self, domain};

/// How the exploration bonus reads `ΦᵀΛ⁻¹Φ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusForm {
    /// `β·λ_max(ΦᵀΛ⁻¹Φ)`.
    #[default]
    Spectral,
    /// `β·√λ_max(ΦᵀΛ⁻¹Φ)`.
    SqrtSpectral,
}

/// Distribution of scalarization weights on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SamplerSpec {
    Dirichlet { alpha: f64 },
    PointMass { upsilon: Vec<f64> },
    FiniteSupport { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec::Dirichlet { alpha: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarizationSampler {
    spec: SamplerSpec,
    agents: usize,
    seed: u64,
}

impl ScalarizationSampler {
    pub fn new(spec: SamplerSpec, agents: usize, seed: u64) -> Result<Self> {
        if agents == 0 {
            return Err(invalid("need at least one agent"));
        }
        match &spec {
            SamplerSpec::Dirichlet { alpha } => {
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    return Err(invalid(format!("Dirichlet concentration must be positive, got {alpha}")));
                }
            }
            SamplerSpec::PointMass { upsilon } => check_simplex(upsilon, agents)?,
            SamplerSpec::FiniteSupport { atoms, weights } => {
                if atoms.is_empty() || atoms.len() != weights.len() {
                    return Err(invalid("finite support needs one weight per atom"));
                }
                for atom in atoms {
                    check_simplex(atom, agents)?;
                }
                check_simplex(weights, weights.len())?;
            }
        }
        Ok(Self { spec, agents, seed })
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// The `t`-th draw; a pure function of the sampler seed and `t`.
    pub fn sample(&self, t: usize) -> Vec<f64> {
        let mut rng = rng::keyed(self.seed, &[domain::SCALARIZATION, t as u64]);
        match &self.spec {
            SamplerSpec::Dirichlet { alpha } => {
                let gamma = Gamma::new(*alpha, 1.0).expect("validated concentration");
                loop {
                    let draws: Vec<f64> = (0..self.agents).map(|_| gamma.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    if total > 0.0 && total.is_finite() {
                        return draws.into_iter().map(|g| g / total).collect();
                    }
                }
            }
            SamplerSpec::PointMass { upsilon } => upsilon.clone(),
            SamplerSpec::FiniteSupport { atoms, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (atom, w) in atoms.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return atom.clone();
                    }
                }
                atoms.last().expect("non-empty support").clone()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_is_constant() {
        let s = ScalarizationSampler::new(SamplerSpec::PointMass { upsilon: vec![0.25; 4] }, 4, 1).unwrap();
        for t in 0..10 {
            assert_eq!(s.sample(t), vec![0.25; 4]);
        }
    }

    #[test]
    fn dirichlet_mean_and_simplex() {
        let s = ScalarizationSampler::new(SamplerSpec::Dirichlet { alpha: 1.0 }, 3, 9).unwrap();
        let n = 100_000;
        let mut mean = [0.0; 3];
        for t in 0..n {
            let u = s.sample(t);
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(u.iter().all(|v| *v >= 0.0));
            for (m, v) in mean.iter_mut().zip(&u) {
                *m += v / n as f64;
            }
        }
        // Var of a Dirichlet(1,1,1) marginal is (1/3)(2/3)/4.
        let sigma = ((1.0 / 3.0) * (2.0 / 3.0) / 4.0 / n as f64).sqrt();
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() <= 3.0 * sigma, "{m}");
        }
        assert_eq!(s.sample(17), s.sample(17));
    }

    #[test]
    fn finite_support_hits_atoms() {
        let atoms = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = ScalarizationSampler::new(SamplerSpec::FiniteSupport { atoms: atoms.clone(), weights: vec![0.3, 0.7] }, 2, 4)
            .unwrap();
        let n = 20_000;
        let first = (0..n).filter(|t| s.sample(*t) == atoms[0]).count() as f64 / n as f64;
        assert!((first - 0.3).abs() < 3.0 * (0.21f64 / n as f64).sqrt());
    }

    #[test]
    fn bad_samplers_are_rejected() {
        assert!(ScalarizationSampler::new(SamplerSpec::Dirichlet { alpha: 0.0 }, 2, 0).is_err());
        assert!(ScalarizationSampler::new(SamplerSpec::PointMass { upsilon: vec![0.5, 0.6] }, 2, 0).is_err());
        assert!(ScalarizationSampler::new(
            SamplerSpec::FiniteSupport { atoms: vec![vec![1.0, 0.0]], weights: vec![0.5, 0.5] },
            2,
            0
        )
        .is_err());
    }
}
