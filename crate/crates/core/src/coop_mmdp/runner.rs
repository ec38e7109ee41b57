use rand::Rng;
use serde::{Deserialize, Serialize};

use super::replica::{act_joint_greedy, sync_rewards, JointLearnerState, JointPlan, RewardSyncReport};
use super::{BonusForm, SamplerSpec, ScalarizationSampler};
use crate::coop_parallel::{BetaMode, BetaSchedule, EpisodeEvent, OPTIMISM_SLACK};
use crate::env::{exact_scalarized_q_star, MmdpSpec, Policy, JOINT_BUDGET};
use crate::error::{invalid, protocol, Result};
use crate::rng::{self, domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpRunConfig {
    pub episodes: usize,
    pub ridge: f64,
    pub c_beta: f64,
    /// Log-det threshold `S`; `S ≤ 1` syncs every episode.
    pub threshold: f64,
    pub seed: u64,
    pub sampler: SamplerSpec,
    pub bonus: BonusForm,
    /// Fixed joint start state; uniform when absent.
    pub start_state: Option<usize>,
    /// Plan on every replica and require identical plans.
    pub replica_checks: bool,
    /// Compare `Q^t` against the scalarized `Q*` each episode.
    pub check_optimism: bool,
}

impl Default for MmdpRunConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            ridge: 1.0,
            c_beta: 1.0,
            threshold: 5.0,
            seed: 0,
            sampler: SamplerSpec::default(),
            bonus: BonusForm::default(),
            start_state: None,
            replica_checks: true,
            check_optimism: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MmdpDiagnostics {
    pub optimism_hits: u64,
    pub optimism_total: u64,
    pub weight_checks: u64,
    pub weight_violations: u64,
    pub max_weight_ratio: f64,
    pub clip_violations: u64,
    pub replica_mismatches: u64,
}

impl MmdpDiagnostics {
    pub fn optimism_frequency(&self) -> f64 {
        if self.optimism_total == 0 {
            1.0
        } else {
            self.optimism_hits as f64 / self.optimism_total as f64
        }
    }

    pub fn violations(&self) -> u64 {
        self.weight_violations + self.clip_violations + self.replica_mismatches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpEpisode {
    pub episode: usize,
    pub upsilon: Vec<f64>,
    pub beta: f64,
    pub start_state: usize,
    pub policy: Policy,
    pub flags: Vec<bool>,
    pub log_det_ratios: Vec<f64>,
    pub replica_digest: String,
    pub sync: Option<RewardSyncReport>,
}

impl MmdpEpisode {
    pub fn flag(&self) -> bool {
        self.flags.iter().any(|f| *f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpTrace {
    pub agents: usize,
    pub episodes: Vec<MmdpEpisode>,
    pub diagnostics: MmdpDiagnostics,
}

impl MmdpTrace {
    pub fn sync_episodes(&self) -> usize {
        self.episodes.iter().filter(|e| e.sync.is_some()).count()
    }

    pub fn events(&self) -> Vec<EpisodeEvent> {
        self.episodes
            .iter()
            .flat_map(|e| {
                (0..self.agents).map(move |m| EpisodeEvent {
                    episode: e.episode,
                    agent: m,
                    sync_flags: e.flags.clone(),
                    log_det_ratios: e.log_det_ratios.clone(),
                    beta: e.beta,
                    actions_digest: e.policy.digest(),
                    upsilon: Some(e.upsilon.clone()),
                    replica_digest: Some(e.replica_digest.clone()),
                })
            })
            .collect()
    }
}

/// The β schedule used for an MMDP, with `d = d₁ + d₂`.
pub fn mmdp_beta(spec: &MmdpSpec, c_beta: f64, episodes: usize) -> Result<BetaSchedule> {
    BetaSchedule::new(BetaMode::Homogeneous, c_beta, spec.feat_dim(), spec.horizon, spec.agents, episodes, 0.0)
}

pub fn run_mmdp(spec: &MmdpSpec, cfg: &MmdpRunConfig) -> Result<MmdpTrace> {
    run_mmdp_with(spec, cfg, |_, _, _| Ok(()))
}

/// As [`run_mmdp`], calling `hook(episode, replicas, plan)` after planning.
pub fn run_mmdp_with<F>(spec: &MmdpSpec, cfg: &MmdpRunConfig, mut hook: F) -> Result<MmdpTrace>
where
    F: FnMut(usize, &[JointLearnerState], &JointPlan) -> Result<()>,
{
    let (s, a_count, h_len, m_count) = (spec.num_states(), spec.num_actions(), spec.horizon, spec.agents);
    if a_count > JOINT_BUDGET {
        return Err(invalid(format!("{a_count} joint actions exceed the enumeration budget")));
    }
    if let Some(x) = cfg.start_state {
        if x >= s {
            return Err(invalid(format!("start state {x} out of range for {s} joint states")));
        }
    }
    if !cfg.threshold.is_finite() || cfg.threshold <= 0.0 {
        return Err(invalid(format!("threshold must be positive, got {}", cfg.threshold)));
    }
    let sampler = ScalarizationSampler::new(cfg.sampler.clone(), m_count, cfg.seed)?;
    let beta = mmdp_beta(spec, cfg.c_beta, cfg.episodes)?;
    let phis = spec.phi_matrices();
    let dim = spec.feat_dim();
    let mut replicas: Vec<JointLearnerState> =
        (0..m_count).map(|m| JointLearnerState::new(m, m_count, dim, h_len, cfg.ridge)).collect::<Result<_>>()?;
    let mut diag = MmdpDiagnostics::default();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for t in 1..=cfg.episodes {
        let upsilon = sampler.sample(t);
        let beta_t = beta.value(t);
        let plan = replicas[0].plan_scalarized(&phis, s, &upsilon, beta_t, cfg.bonus)?;
        let digest = replicas[0].digest();
        if cfg.replica_checks {
            for r in replicas.iter_mut().skip(1) {
                let other = r.plan_scalarized(&phis, s, &upsilon, beta_t, cfg.bonus)?;
                if other != plan || r.digest() != digest {
                    diag.replica_mismatches += 1;
                }
            }
        }
        check_plan(spec, &plan, cfg, t, &mut diag)?;
        hook(t, &replicas, &plan)?;

        let mut x = match cfg.start_state {
            Some(x) => x,
            None => rng::keyed(cfg.seed, &[domain::INITIAL_STATE, 0, t as u64]).random_range(0..s),
        };
        let start_state = x;
        let mut flags = vec![false; h_len];
        let mut ratios = vec![0.0; h_len];
        for h in 0..h_len {
            let a = act_joint_greedy(&plan, h, x)?;
            let mut step_rng = rng::keyed(cfg.seed, &[domain::TRANSITION, 0, t as u64, h as u64]);
            let (rewards, next) = spec.step(x, a, h, &mut step_rng)?;
            let phi = &phis[x * a_count + a];
            let mut votes = Vec::with_capacity(m_count);
            for r in replicas.iter_mut() {
                let own = rewards[r.replica];
                votes.push(r.observe_and_check(t, h, x, a, next, own, phi, cfg.threshold)?);
            }
            if votes.iter().any(|v| *v != votes[0]) {
                return Err(protocol(format!("replicas disagree on the trigger at episode {t} step {h}")));
            }
            flags[h] = votes[0];
            ratios[h] = replicas[0].steps[h].log_det_growth();
            x = next;
        }
        let sync = if flags.iter().any(|f| *f) { Some(sync_rewards(&mut replicas, t)?) } else { None };
        episodes.push(MmdpEpisode {
            episode: t,
            upsilon,
            beta: beta_t,
            start_state,
            policy: plan.greedy_policy(),
            flags,
            log_det_ratios: ratios,
            replica_digest: digest,
            sync,
        });
    }
    Ok(MmdpTrace { agents: m_count, episodes, diagnostics: diag })
}

fn check_plan(spec: &MmdpSpec, plan: &JointPlan, cfg: &MmdpRunConfig, t: usize, diag: &mut MmdpDiagnostics) -> Result<()> {
    let h_len = spec.horizon;
    let bound = 2.0 * h_len as f64 * spec.agents as f64 * (spec.feat_dim() as f64 * t as f64 / cfg.ridge).sqrt();
    let optimum = if cfg.check_optimism { Some(exact_scalarized_q_star(spec, &plan.upsilon)?) } else { None };
    for h in 0..h_len {
        let ratio = plan.weights[h].norm() / bound;
        diag.weight_checks += 1;
        diag.max_weight_ratio = diag.max_weight_ratio.max(ratio);
        if ratio > 1.0 {
            diag.weight_violations += 1;
        }
        let cap = (h_len - h) as f64;
        for (z, q) in plan.q[h].iter().enumerate() {
            if !(0.0..=cap).contains(q) {
                diag.clip_violations += 1;
            }
            if let Some(opt) = &optimum {
                diag.optimism_total += 1;
                if *q >= opt.q_star[h][z] - OPTIMISM_SLACK {
                    diag.optimism_hits += 1;
                }
            }
        }
    }
    Ok(())
}
