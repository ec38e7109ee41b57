use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{AgentLearnerState, EpisodePlan, FeatureTable, TransitionRecord};
use super::server::{server_sync, SyncReport};
use super::{BetaSchedule, SyncPolicy};
use crate::env::{exact_q_star, DpSolution, ParallelEnvSet, Policy};
use crate::error::{invalid, Result};
use crate::rng::{self, domain};

/// Slack on the optimism comparison `Q^t ≥ Q*`.
pub const OPTIMISM_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelRunConfig {
    pub episodes: usize,
    pub ridge: f64,
    pub c_beta: f64,
    pub sync: SyncPolicy,
    pub seed: u64,
    /// Rebuild covariances from the stores after every plan.
    pub check_covariance: bool,
}

impl Default for ParallelRunConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            ridge: 1.0,
            c_beta: 1.0,
            sync: SyncPolicy::Threshold(5.0),
            seed: 0,
            check_covariance: false,
        }
    }
}

/// Runtime invariant counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParallelDiagnostics {
    pub optimism_hits: u64,
    pub optimism_total: u64,
    pub weight_checks: u64,
    pub weight_violations: u64,
    /// Largest `‖w‖ / bound` seen.
    pub max_weight_ratio: f64,
    pub clip_violations: u64,
    pub covariance_violations: u64,
}

impl ParallelDiagnostics {
    pub fn optimism_frequency(&self) -> f64 {
        if self.optimism_total == 0 {
            1.0
        } else {
            self.optimism_hits as f64 / self.optimism_total as f64
        }
    }

    pub fn violations(&self) -> u64 {
        self.weight_violations + self.clip_violations + self.covariance_violations
    }

    pub fn merge(&mut self, other: &ParallelDiagnostics) {
        self.optimism_hits += other.optimism_hits;
        self.optimism_total += other.optimism_total;
        self.weight_checks += other.weight_checks;
        self.weight_violations += other.weight_violations;
        self.max_weight_ratio = self.max_weight_ratio.max(other.max_weight_ratio);
        self.clip_violations += other.clip_violations;
        self.covariance_violations += other.covariance_violations;
    }
}

/// What happened in one episode, per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub beta: f64,
    pub start_states: Vec<usize>,
    pub policies: Vec<Policy>,
    /// `flags[m][h]`.
    pub flags: Vec<Vec<bool>>,
    /// `log_det_ratios[m][h]` after the step's observation.
    pub log_det_ratios: Vec<Vec<f64>>,
    pub sync: Option<SyncReport>,
}

/// One JSON-lines event per agent and episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    pub episode: usize,
    pub agent: usize,
    pub sync_flags: Vec<bool>,
    pub log_det_ratios: Vec<f64>,
    pub beta: f64,
    pub actions_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replica_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelTrace {
    pub agents: usize,
    pub episodes: Vec<EpisodeTrace>,
    pub diagnostics: ParallelDiagnostics,
}

impl ParallelTrace {
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
                    sync_flags: e.flags[m].clone(),
                    log_det_ratios: e.log_det_ratios[m].clone(),
                    beta: e.beta,
                    actions_digest: e.policies[m].digest(),
                    upsilon: None,
                    replica_digest: None,
                })
            })
            .collect()
    }
}

/// Runs the protocol with the set's own β schedule and agent streams `0..M`.
pub fn run_parallel(set: &ParallelEnvSet, cfg: &ParallelRunConfig) -> Result<ParallelTrace> {
    let beta = BetaSchedule::for_set(set, cfg.c_beta, cfg.episodes)?;
    let streams: Vec<u64> = (0..set.agents as u64).collect();
    run_parallel_with(set, cfg, &beta, &streams, |_, _, _| Ok(()))
}

/// Full control: explicit β schedule, per-agent rng stream ids, and a hook
/// called after every planning pass with `(episode, agents, plans)`.
pub fn run_parallel_with<F>(
    set: &ParallelEnvSet,
    cfg: &ParallelRunConfig,
    beta: &BetaSchedule,
    streams: &[u64],
    mut hook: F,
) -> Result<ParallelTrace>
where
    F: FnMut(usize, &[AgentLearnerState], &[EpisodePlan]) -> Result<()>,
{
    if streams.len() != set.agents {
        return Err(invalid("need one rng stream id per agent"));
    }
    let features = FeatureTable::for_set(set)?;
    let (s, h_len, m_count) = (set.num_states(), set.horizon(), set.agents);
    let optima: Vec<DpSolution> = set.specs.iter().map(exact_q_star).collect::<Result<_>>()?;
    let mut agents: Vec<AgentLearnerState> = (0..m_count)
        .map(|m| AgentLearnerState::new(m, set.feat_dim(), h_len, cfg.ridge))
        .collect::<Result<_>>()?;
    let mut diag = ParallelDiagnostics::default();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let d_eff = set.feat_dim() as f64;
    for t in 1..=cfg.episodes {
        let beta_t = beta.value(t);
        let plans: Vec<EpisodePlan> =
            agents.iter_mut().map(|a| a.plan_any(&features, beta_t)).collect::<Result<_>>()?;
        let bound = 2.0 * h_len as f64 * (d_eff * m_count as f64 * t as f64 / cfg.ridge).sqrt();
        for (m, plan) in plans.iter().enumerate() {
            for (h, w) in plan.weights.iter().enumerate() {
                let ratio = w.norm() / bound;
                diag.weight_checks += 1;
                diag.max_weight_ratio = diag.max_weight_ratio.max(ratio);
                if ratio > 1.0 {
                    diag.weight_violations += 1;
                }
                let cap = (h_len - h) as f64;
                let q_star = &optima[m].q_star[h];
                for (z, q) in plan.q[h][plan.slot].iter().enumerate() {
                    if !(0.0..=cap).contains(q) {
                        diag.clip_violations += 1;
                    }
                    diag.optimism_total += 1;
                    if *q >= q_star[z] - OPTIMISM_SLACK {
                        diag.optimism_hits += 1;
                    }
                }
            }
            if cfg.check_covariance && agents[m].covariance_drift(&features) > 1e-9 {
                diag.covariance_violations += 1;
            }
        }
        hook(t, &agents, &plans)?;

        let mut start_states = Vec::with_capacity(m_count);
        let mut flags = vec![vec![false; h_len]; m_count];
        let mut ratios = vec![vec![0.0; h_len]; m_count];
        let mut any = false;
        for (m, agent) in agents.iter_mut().enumerate() {
            let mut x = rng::keyed(cfg.seed, &[domain::INITIAL_STATE, streams[m], t as u64]).random_range(0..s);
            start_states.push(x);
            for h in 0..h_len {
                let a = plans[m].act(h, x);
                let mut step_rng = rng::keyed(cfg.seed, &[domain::TRANSITION, streams[m], t as u64, h as u64]);
                let (reward, next) = set.specs[m].step(x, a, h, &mut step_rng)?;
                let rec = TransitionRecord { agent: m, episode: t, h, state: x, action: a, reward, next_state: next };
                flags[m][h] = agent.observe(rec, &features, cfg.sync)?;
                ratios[m][h] = agent.steps[h].log_det_growth();
                any |= flags[m][h];
                x = next;
            }
        }
        let sync = if any { Some(server_sync(&mut agents, &features, t)?) } else { None };
        episodes.push(EpisodeTrace {
            episode: t,
            beta: beta_t,
            start_states,
            policies: plans.iter().map(EpisodePlan::greedy_policy).collect(),
            flags,
            log_det_ratios: ratios,
            sync,
        });
    }
    Ok(ParallelTrace { agents: m_count, episodes, diagnostics: diag })
}
