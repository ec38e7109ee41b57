use serde::{Deserialize, Serialize};

use super::agent::{AgentLearnerState, FeatureTable, TransitionRecord};
use crate::error::{protocol, Result};

/// Scalars per transmitted transition: source agent, state, action, reward,
/// next state.
pub const RECORD_SCALARS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSyncCounts {
    pub uploads: usize,
    pub downloads: usize,
    pub transitions: usize,
    pub upload_scalars: usize,
    pub download_scalars: usize,
    pub duplicates_dropped: usize,
}

/// Message accounting for one synchronization round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub episode: usize,
    pub steps: Vec<StepSyncCounts>,
}

impl SyncReport {
    pub fn uploads(&self) -> usize {
        self.steps.iter().map(|s| s.uploads).sum()
    }

    pub fn downloads(&self) -> usize {
        self.steps.iter().map(|s| s.downloads).sum()
    }

    pub fn payload_scalars(&self) -> usize {
        self.steps.iter().map(|s| s.upload_scalars + s.download_scalars).sum()
    }
}

/// Collects every agent's outbox per step, broadcasts the union in
/// `(episode, agent)` order, and resets the unsynced statistics.
///
/// Afterwards every agent holds the same store and synced covariance per
/// step, and `last_sync` is `episode`.
pub fn server_sync(agents: &mut [AgentLearnerState], features: &FeatureTable, episode: usize) -> Result<SyncReport> {
    let Some(first) = agents.first() else {
        return Err(protocol("synchronization with no agents"));
    };
    let horizon = first.horizon();
    if agents.iter().any(|a| a.horizon() != horizon || a.dim() != first.dim()) {
        return Err(protocol("agents disagree on the step range or feature dimension"));
    }
    if agents.iter().any(|a| a.last_sync != first.last_sync) {
        return Err(protocol("agents disagree on the last synchronization episode"));
    }
    if episode <= first.last_sync {
        return Err(protocol(format!("sync at episode {episode} does not follow {}", first.last_sync)));
    }
    let m = agents.len();
    let mut report = SyncReport { episode, steps: Vec::with_capacity(horizon) };
    for h in 0..horizon {
        let mut union: Vec<TransitionRecord> = Vec::new();
        let mut own_counts = Vec::with_capacity(m);
        for agent in agents.iter() {
            let outbox = &agent.steps[h].outbox;
            if outbox.iter().any(|r| r.h != h || r.agent != agent.agent) {
                return Err(protocol(format!("agent {} outbox holds foreign records at step {h}", agent.agent)));
            }
            own_counts.push(outbox.len());
            union.extend_from_slice(outbox);
        }
        union.sort_by_key(|r| r.key());
        let before = union.len();
        union.dedup_by_key(|r| r.key());
        let mut dropped = before - union.len();
        let synced = &agents[0].steps[h];
        let len = union.len();
        union.retain(|r| !synced.is_synced(r.key()));
        dropped += len - union.len();
        for agent in agents.iter_mut() {
            let own = agent.agent;
            agent.steps[h].absorb(&union, own, features)?;
        }
        let total = union.len();
        report.steps.push(StepSyncCounts {
            uploads: m,
            downloads: m,
            transitions: total,
            upload_scalars: own_counts.iter().sum::<usize>() * RECORD_SCALARS,
            download_scalars: own_counts.iter().map(|c| total.saturating_sub(*c)).sum::<usize>() * RECORD_SCALARS,
            duplicates_dropped: dropped,
        });
    }
    for agent in agents.iter_mut() {
        agent.last_sync = episode;
    }
    Ok(report)
}
