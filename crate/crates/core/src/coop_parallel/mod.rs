//! Cooperative LSVI agents for parallel linear MDPs and the server that
//! synchronizes them.

mod agent;
mod runner;
mod server;

pub use agent::{AgentLearnerState, EpisodePlan, FeatureTable, StepStats, TransitionRecord};
pub use runner::{
    run_parallel, run_parallel_with, EpisodeEvent, EpisodeTrace, ParallelDiagnostics, ParallelRunConfig,
    ParallelTrace, OPTIMISM_SLACK,
};
pub use server::{server_sync, StepSyncCounts, SyncReport, RECORD_SCALARS};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{Flavor, ParallelEnvSet};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Homogeneous,
    SmallDeviation,
    Contextual,
}

/// Confidence multiplier `β(t)` for episode `t ≥ 1`.
///
/// `c_β·H·√(d_eff·ln(1 + tMH))`, plus `c_β·ξ·√(d_eff·M·T)` in the
/// small-deviation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub mode: BetaMode,
    pub c_beta: f64,
    pub d_eff: usize,
    pub horizon: usize,
    pub agents: usize,
    pub episodes: usize,
    pub xi: f64,
}

impl BetaSchedule {
    pub fn new(
        mode: BetaMode,
        c_beta: f64,
        d_eff: usize,
        horizon: usize,
        agents: usize,
        episodes: usize,
        xi: f64,
    ) -> Result<Self> {
        if !(c_beta > 0.0) || !c_beta.is_finite() {
            return Err(invalid(format!("c_beta must be positive, got {c_beta}")));
        }
        if d_eff == 0 || horizon == 0 || agents == 0 {
            return Err(invalid("β needs positive dimension, horizon and agent count"));
        }
        if !(0.0..1.0).contains(&xi) {
            return Err(invalid(format!("ξ = {xi} must lie in [0, 1)")));
        }
        Ok(Self { mode, c_beta, d_eff, horizon, agents, episodes, xi })
    }

    /// The schedule matching a set's flavor.
    pub fn for_set(set: &ParallelEnvSet, c_beta: f64, episodes: usize) -> Result<Self> {
        let mode = match set.flavor {
            Flavor::Homogeneous => BetaMode::Homogeneous,
            Flavor::SmallDeviation { .. } => BetaMode::SmallDeviation,
            Flavor::Contextual { .. } => BetaMode::Contextual,
        };
        Self::new(mode, c_beta, set.feat_dim(), set.horizon(), set.agents, episodes, set.xi())
    }

    pub fn value(&self, t: usize) -> f64 {
        let (h, d, m) = (self.horizon as f64, self.d_eff as f64, self.agents as f64);
        let base = self.c_beta * h * (d * (t as f64 * m * h).ln_1p()).sqrt();
        match self.mode {
            BetaMode::SmallDeviation => base + self.c_beta * self.xi * (d * m * self.episodes as f64).sqrt(),
            _ => base,
        }
    }
}

/// When agents ask the server to synchronize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyncPolicy {
    /// Flag when the log-det growth beats `S / max(Δt, 1)`.
    Threshold(f64),
    Always,
    Never,
}

impl SyncPolicy {
    pub fn threshold(s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(invalid(format!("sync threshold must be positive, got {s}")));
        }
        Ok(SyncPolicy::Threshold(s))
    }

    /// `ratio` is the log-det growth since the last sync, `since_sync` is `Δt`.
    pub fn fires(&self, ratio: f64, since_sync: usize) -> bool {
        match *self {
            SyncPolicy::Threshold(s) => ratio > s / since_sync.max(1) as f64,
            SyncPolicy::Always => true,
            SyncPolicy::Never => false,
        }
    }

    /// Numeric threshold, `None` for the sentinels.
    pub fn value(&self) -> Option<f64> {
        match *self {
            SyncPolicy::Threshold(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SyncRepr {
    Threshold(f64),
    Sentinel(String),
}

impl Serialize for SyncPolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            SyncPolicy::Threshold(s) => SyncRepr::Threshold(s),
            SyncPolicy::Always => SyncRepr::Sentinel("always".into()),
            SyncPolicy::Never => SyncRepr::Sentinel("never".into()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SyncPolicy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        match SyncRepr::deserialize(deserializer)? {
            SyncRepr::Threshold(s) if s > 0.0 && s.is_finite() => Ok(SyncPolicy::Threshold(s)),
            SyncRepr::Threshold(s) => Err(D::Error::custom(format!("sync threshold must be positive, got {s}"))),
            SyncRepr::Sentinel(s) if s == "always" => Ok(SyncPolicy::Always),
            SyncRepr::Sentinel(s) if s == "never" => Ok(SyncPolicy::Never),
            SyncRepr::Sentinel(s) => Err(D::Error::custom(format!(
                "sync must be a positive number, \"always\" or \"never\", got {s:?}"
            ))),
        }
    }
}
