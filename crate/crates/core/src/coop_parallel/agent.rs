use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SyncPolicy;
use crate::env::{argmax_first, Flavor, ParallelEnvSet, Policy};
use crate::error::{invalid, Result};
use crate::linalg::{DesignAccumulator, RegularizedCovariance};

/// One observed transition of one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub agent: usize,
    pub episode: usize,
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

impl TransitionRecord {
    pub fn key(&self) -> (usize, usize) {
        (self.episode, self.agent)
    }
}

/// Learner-side features. Shared tables have one row; contextual tables
/// have one row per agent, `[c·φ(x,a); κ(n)]`.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    rows: Vec<Vec<DVector<f64>>>,
    num_states: usize,
    num_actions: usize,
}

impl FeatureTable {
    pub fn shared(features: Vec<DVector<f64>>, num_states: usize, num_actions: usize) -> Result<Self> {
        Self::from_rows(vec![features], num_states, num_actions)
    }

    pub fn from_rows(rows: Vec<Vec<DVector<f64>>>, num_states: usize, num_actions: usize) -> Result<Self> {
        let dim = rows.first().and_then(|r| r.first()).map(|f| f.len()).unwrap_or(0);
        if dim == 0 {
            return Err(invalid("feature table is empty"));
        }
        if rows.iter().any(|r| r.len() != num_states * num_actions || r.iter().any(|f| f.len() != dim)) {
            return Err(invalid("feature table shape mismatch"));
        }
        Ok(Self { rows, num_states, num_actions })
    }

    /// Shared table for homogeneous and small-deviation sets, one row per
    /// agent for contextual sets.
    pub fn for_set(set: &ParallelEnvSet) -> Result<Self> {
        let (s, a) = (set.num_states(), set.num_actions());
        match set.flavor {
            Flavor::Contextual { .. } => {
                Self::from_rows(set.specs.iter().map(|sp| sp.feature_vectors()).collect(), s, a)
            }
            _ => Self::shared(set.specs[0].feature_vectors(), s, a),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows[0][0].len()
    }

    pub fn sources(&self) -> usize {
        self.rows.len()
    }

    pub fn is_contextual(&self) -> bool {
        self.rows.len() > 1
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Row used for agent `source`'s transitions.
    pub fn slot(&self, source: usize) -> usize {
        if self.rows.len() == 1 {
            0
        } else {
            source
        }
    }

    pub fn phi(&self, source: usize, z: usize) -> &DVector<f64> {
        &self.rows[self.slot(source)][z]
    }
}

/// Statistics of one agent at one step.
#[derive(Clone, Debug)]
pub struct StepStats {
    /// `λI + S`: data from all agents through the last sync.
    pub synced: RegularizedCovariance,
    /// `λI + S + δS`: what planning uses.
    pub local: RegularizedCovariance,
    /// `δS`.
    pub pending: DMatrix<f64>,
    /// Synced transitions of every agent, then own transitions since.
    pub store: Vec<TransitionRecord>,
    pub synced_len: usize,
    pub outbox: Vec<TransitionRecord>,
    pub weights: DVector<f64>,
    keys: HashSet<(usize, usize)>,
    synced_keys: HashSet<(usize, usize)>,
}

impl StepStats {
    fn new(dim: usize, ridge: f64) -> Result<Self> {
        let cov = RegularizedCovariance::new(dim, ridge)?;
        Ok(Self {
            synced: cov.clone(),
            local: cov,
            pending: DMatrix::zeros(dim, dim),
            store: Vec::new(),
            synced_len: 0,
            outbox: Vec::new(),
            weights: DVector::zeros(dim),
            keys: HashSet::new(),
            synced_keys: HashSet::new(),
        })
    }

    pub fn log_det_growth(&self) -> f64 {
        self.local.log_det() - self.synced.log_det()
    }

    pub(crate) fn contains(&self, key: (usize, usize)) -> bool {
        self.keys.contains(&key)
    }

    pub(crate) fn is_synced(&self, key: (usize, usize)) -> bool {
        self.synced_keys.contains(&key)
    }

    /// Replaces the unsynced tail with the broadcast union.
    pub(crate) fn absorb(&mut self, union: &[TransitionRecord], own: usize, features: &FeatureTable) -> Result<()> {
        for rec in &self.store[self.synced_len..] {
            self.keys.remove(&rec.key());
        }
        self.store.truncate(self.synced_len);
        let foreign = union.iter().any(|r| r.agent != own);
        if foreign {
            let na = features.num_actions();
            self.synced.merge_outer_products(
                union.iter().map(|r| features.phi(r.agent, r.state * na + r.action)),
            )?;
            self.local = self.synced.clone();
        } else {
            // Nothing new arrived: the local statistics are already complete.
            self.synced = self.local.clone();
        }
        for rec in union {
            self.keys.insert(rec.key());
            self.synced_keys.insert(rec.key());
        }
        self.store.extend_from_slice(union);
        self.synced_len = self.store.len();
        self.outbox.clear();
        self.pending.fill(0.0);
        Ok(())
    }
}

/// Per-episode output of planning: Q and V tables for every feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub beta: f64,
    /// Row of the feature table the agent acts on.
    pub slot: usize,
    pub num_actions: usize,
    /// `q[h][row][z]`.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `v[h][row][x]`, with an all-zero entry at `h = H`.
    pub v: Vec<Vec<Vec<f64>>>,
    /// `weights[h]`.
    pub weights: Vec<DVector<f64>>,
}

impl EpisodePlan {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn q_value(&self, h: usize, x: usize, a: usize) -> f64 {
        self.q[h][self.slot][x * self.num_actions + a]
    }

    pub fn q_row(&self, h: usize, x: usize) -> &[f64] {
        &self.q[h][self.slot][x * self.num_actions..(x + 1) * self.num_actions]
    }

    /// Greedy action, lowest index on ties.
    pub fn act(&self, h: usize, x: usize) -> usize {
        argmax_first(self.q_row(h, x))
    }

    /// The full greedy table executed this episode.
    pub fn greedy_policy(&self) -> Policy {
        let states = self.v[0][self.slot].len();
        Policy {
            actions: (0..self.horizon())
                .map(|h| (0..states).map(|x| self.act(h, x)).collect())
                .collect(),
        }
    }
}

/// One agent's synced and unsynced statistics, per step.
#[derive(Clone, Debug)]
pub struct AgentLearnerState {
    pub agent: usize,
    pub steps: Vec<StepStats>,
    /// Episode of the last synchronization, 0 before any.
    pub last_sync: usize,
    ridge: f64,
}

impl AgentLearnerState {
    pub fn new(agent: usize, dim: usize, horizon: usize, ridge: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        let steps = (0..horizon).map(|_| StepStats::new(dim, ridge)).collect::<Result<_>>()?;
        Ok(Self { agent, steps, last_sync: 0, ridge })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].local.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// LSVI backward pass with a shared feature table.
    pub fn plan(&mut self, features: &FeatureTable, beta: f64) -> Result<EpisodePlan> {
        if features.is_contextual() {
            return Err(invalid("contextual feature table passed to the shared planner"));
        }
        self.plan_rows(features, beta)
    }

    /// LSVI backward pass over per-agent augmented features. Values are
    /// computed for every agent's context; the agent acts on its own row.
    pub fn plan_contextual(&mut self, features: &FeatureTable, beta: f64) -> Result<EpisodePlan> {
        if !features.is_contextual() && features.sources() != 1 {
            return Err(invalid("contextual planning needs one feature row per agent"));
        }
        if features.is_contextual() && self.agent >= features.sources() {
            return Err(invalid(format!("no context row for agent {}", self.agent)));
        }
        self.plan_rows(features, beta)
    }

    /// Dispatches on the table shape.
    pub fn plan_any(&mut self, features: &FeatureTable, beta: f64) -> Result<EpisodePlan> {
        if features.is_contextual() {
            self.plan_contextual(features, beta)
        } else {
            self.plan(features, beta)
        }
    }

    fn plan_rows(&mut self, features: &FeatureTable, beta: f64) -> Result<EpisodePlan> {
        if features.dim() != self.dim() {
            return Err(invalid("feature dimension differs from the learner's"));
        }
        let horizon = self.horizon();
        let (s, na, rows) = (features.num_states(), features.num_actions(), features.sources());
        let mut q = vec![Vec::new(); horizon];
        let mut v = vec![vec![vec![0.0; s]; rows]; horizon + 1];
        let dim = self.dim();
        let mut weights = vec![DVector::zeros(dim); horizon];
        for h in (0..horizon).rev() {
            let stats = &mut self.steps[h];
            let mut acc = DesignAccumulator::new(dim, 1)?;
            for rec in &stats.store {
                let target = rec.reward + v[h + 1][features.slot(rec.agent)][rec.next_state];
                acc.add_scalar(features.phi(rec.agent, rec.state * na + rec.action), target)?;
            }
            let w = stats.local.ridge_solve(&acc)?.column(0).into_owned();
            let cap = (horizon - h) as f64;
            let mut q_h = vec![vec![0.0; s * na]; rows];
            for (row, q_row) in q_h.iter_mut().enumerate() {
                for (z, slot) in q_row.iter_mut().enumerate() {
                    let phi = &features.rows[row][z];
                    let raw = phi.dot(&w) + beta * stats.local.ellipsoid_norm(phi)?;
                    *slot = raw.clamp(0.0, cap);
                }
                for x in 0..s {
                    v[h][row][x] = q_row[x * na..(x + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
            }
            stats.weights = w.clone();
            weights[h] = w;
            q[h] = q_h;
        }
        Ok(EpisodePlan {
            beta,
            slot: features.slot(self.agent),
            num_actions: na,
            q,
            v,
            weights,
        })
    }

    /// Folds one own transition into `δS`, the store and the outbox, and
    /// reports whether the sync trigger fires.
    pub fn observe(
        &mut self,
        rec: TransitionRecord,
        features: &FeatureTable,
        policy: SyncPolicy,
    ) -> Result<bool> {
        if rec.agent != self.agent {
            return Err(invalid(format!("agent {} observed a transition of agent {}", self.agent, rec.agent)));
        }
        if rec.h >= self.horizon() || rec.state >= features.num_states() || rec.next_state >= features.num_states()
            || rec.action >= features.num_actions()
        {
            return Err(invalid(format!("transition {rec:?} out of range")));
        }
        if rec.episode <= self.last_sync {
            return Err(invalid("transition predates the last synchronization"));
        }
        let stats = &mut self.steps[rec.h];
        if stats.contains(rec.key()) {
            return Err(invalid(format!("duplicate transition for episode {} step {}", rec.episode, rec.h)));
        }
        let phi = features.phi(rec.agent, rec.state * features.num_actions() + rec.action);
        stats.local.rank_one_update(phi)?;
        stats.pending.ger(1.0, phi, phi, 1.0);
        stats.keys.insert(rec.key());
        stats.store.push(rec);
        stats.outbox.push(rec);
        Ok(policy.fires(stats.log_det_growth(), rec.episode - self.last_sync))
    }

    /// Largest entrywise gap between the planning covariance and
    /// `λI + Σ φφᵀ` rebuilt from the store.
    pub fn covariance_drift(&self, features: &FeatureTable) -> f64 {
        let na = features.num_actions();
        self.steps
            .iter()
            .map(|stats| {
                let mut m = DMatrix::identity(self.dim(), self.dim()) * self.ridge;
                for rec in &stats.store {
                    let phi = features.phi(rec.agent, rec.state * na + rec.action);
                    m.ger(1.0, phi, phi, 1.0);
                }
                (m - stats.local.matrix()).amax()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_linear_mdp;

    fn unit_table() -> FeatureTable {
        // Two states, one action, features e₁ and e₂.
        FeatureTable::shared(vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])], 2, 1)
            .unwrap()
    }

    fn rec(agent: usize, episode: usize, h: usize, state: usize, reward: f64) -> TransitionRecord {
        TransitionRecord { agent, episode, h, state, action: 0, reward, next_state: 0 }
    }

    #[test]
    fn empty_store_plans_pure_bonus() {
        let table = unit_table();
        let mut agent = AgentLearnerState::new(0, 2, 3, 1.0).unwrap();
        let plan = agent.plan(&table, 0.7).unwrap();
        for h in 0..3 {
            assert_eq!(plan.weights[h], DVector::zeros(2));
            assert_eq!(plan.q_value(h, 0, 0), 0.7f64.min((3 - h) as f64));
        }
        let plan = agent.plan(&table, 10.0).unwrap();
        assert_eq!(plan.q_value(0, 1, 0), 3.0);
        assert_eq!(plan.q_value(2, 1, 0), 1.0);
    }

    #[test]
    fn single_transition_ridge_shrinkage() {
        let table = unit_table();
        let mut agent = AgentLearnerState::new(0, 2, 1, 1.0).unwrap();
        agent.observe(rec(0, 1, 0, 0, 1.0), &table, SyncPolicy::Never).unwrap();
        let plan = agent.plan(&table, 0.0).unwrap();
        assert!((&plan.weights[0] - DVector::from_vec(vec![0.5, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn first_observation_trigger() {
        let table = unit_table();
        let mut agent = AgentLearnerState::new(0, 2, 1, 1.0).unwrap();
        let fired = agent.observe(rec(0, 1, 0, 0, 1.0), &table, SyncPolicy::Threshold(0.5)).unwrap();
        assert!(fired);
        assert!((agent.steps[0].log_det_growth() - 2.0f64.ln()).abs() < 1e-12);
        let mut agent = AgentLearnerState::new(0, 2, 1, 1.0).unwrap();
        assert!(!agent.observe(rec(0, 1, 0, 0, 1.0), &table, SyncPolicy::Threshold(0.7)).unwrap());
    }

    #[test]
    fn sentinel_policies() {
        let table = unit_table();
        let mut a = AgentLearnerState::new(0, 2, 1, 1.0).unwrap();
        let mut b = a.clone();
        for t in 1..5 {
            assert!(!a.observe(rec(0, t, 0, t % 2, 0.5), &table, SyncPolicy::Never).unwrap());
            assert!(b.observe(rec(0, t, 0, t % 2, 0.5), &table, SyncPolicy::Always).unwrap());
        }
    }

    #[test]
    fn observe_rejects_bad_records() {
        let table = unit_table();
        let mut agent = AgentLearnerState::new(0, 2, 1, 1.0).unwrap();
        assert!(agent.observe(rec(1, 1, 0, 0, 1.0), &table, SyncPolicy::Never).is_err());
        assert!(agent.observe(rec(0, 1, 1, 0, 1.0), &table, SyncPolicy::Never).is_err());
        agent.observe(rec(0, 1, 0, 0, 1.0), &table, SyncPolicy::Never).unwrap();
        assert!(agent.observe(rec(0, 1, 0, 1, 1.0), &table, SyncPolicy::Never).is_err());
    }

    #[test]
    fn greedy_tie_break_and_choice() {
        let plan = EpisodePlan {
            beta: 0.0,
            slot: 0,
            num_actions: 3,
            q: vec![vec![vec![0.5, 0.5, 0.5, 0.1, 0.9, 0.5]]],
            v: vec![vec![vec![0.5, 0.9]], vec![vec![0.0, 0.0]]],
            weights: vec![DVector::zeros(1)],
        };
        assert_eq!(plan.act(0, 0), 0);
        assert_eq!(plan.act(0, 1), 1);
        assert_eq!(plan.greedy_policy().actions, vec![vec![0, 1]]);
    }

    #[test]
    fn clipping_holds_for_random_plans() {
        let spec = generate_linear_mdp(4, 3, 3, 3, 2).unwrap();
        let table = FeatureTable::shared(spec.feature_vectors(), 4, 3).unwrap();
        let mut agent = AgentLearnerState::new(0, 3, 3, 1.0).unwrap();
        for t in 1..=20 {
            for h in 0..3 {
                let r = TransitionRecord {
                    agent: 0,
                    episode: t,
                    h,
                    state: (t + h) % 4,
                    action: t % 3,
                    reward: spec.reward(h, (t + h) % 4, t % 3),
                    next_state: (t * 7 + h) % 4,
                };
                agent.observe(r, &table, SyncPolicy::Never).unwrap();
            }
            let plan = agent.plan(&table, 0.3).unwrap();
            for h in 0..3 {
                assert!(plan.q[h][0].iter().all(|q| *q >= 0.0 && *q <= (3 - h) as f64));
            }
        }
        assert!(agent.covariance_drift(&table) < 1e-9);
    }
}
