use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BonusForm;
use crate::env::{argmax_first, Policy, JOINT_BUDGET};
use crate::error::{invalid, protocol, Result};
use crate::linalg::{max_eigenvalue, DesignAccumulator, RegularizedCovariance};

/// A synchronized joint transition with every agent's reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub episode: usize,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub rewards: Vec<f64>,
}

/// A joint transition not yet synchronized: only this replica's reward.
#[derive(Clone, Debug, PartialEq)]
struct PendingRecord {
    episode: usize,
    state: usize,
    action: usize,
    next_state: usize,
    own_reward: f64,
}

#[derive(Clone, Debug)]
pub struct JointStep {
    /// `Λ^h` at the last sync; the only covariance planning sees.
    pub snapshot: RegularizedCovariance,
    /// `Λ^h + δΛ^h`, tracked for the trigger.
    pub current: RegularizedCovariance,
    /// `δΛ^h`.
    pub pending: DMatrix<f64>,
    /// Joint transitions of episodes `≤ k_t`.
    pub history: Vec<JointRecord>,
    unsynced: Vec<PendingRecord>,
    hasher: Sha256,
    /// `(last_sync, bonus per joint pair)` for the snapshot.
    bonus_cache: Option<(usize, BonusForm, Vec<f64>)>,
}

impl JointStep {
    fn new(dim: usize, ridge: f64) -> Result<Self> {
        let cov = RegularizedCovariance::new(dim, ridge)?;
        Ok(Self {
            snapshot: cov.clone(),
            current: cov,
            pending: DMatrix::zeros(dim, dim),
            history: Vec::new(),
            unsynced: Vec::new(),
            hasher: Sha256::new(),
            bonus_cache: None,
        })
    }

    pub fn unsynced_len(&self) -> usize {
        self.unsynced.len()
    }

    pub fn log_det_growth(&self) -> f64 {
        self.current.log_det() - self.snapshot.log_det()
    }
}

/// Output of scalarized planning, shared by all replicas.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPlan {
    pub upsilon: Vec<f64>,
    pub beta: f64,
    pub num_actions: usize,
    /// `q[h][z]`.
    pub q: Vec<Vec<f64>>,
    /// `v[h][x]`, all zero at `h = H`.
    pub v: Vec<Vec<f64>>,
    pub weights: Vec<DVector<f64>>,
}

impl JointPlan {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn q_row(&self, h: usize, x: usize) -> &[f64] {
        &self.q[h][x * self.num_actions..(x + 1) * self.num_actions]
    }

    pub fn greedy_policy(&self) -> Policy {
        let states = self.v[0].len();
        Policy {
            actions: (0..self.horizon())
                .map(|h| (0..states).map(|x| argmax_first(self.q_row(h, x))).collect())
                .collect(),
        }
    }
}

/// Joint greedy action by full enumeration, lexicographically smallest on ties.
pub fn act_joint_greedy(plan: &JointPlan, h: usize, x: usize) -> Result<usize> {
    if plan.num_actions > JOINT_BUDGET {
        return Err(invalid(format!("{} joint actions exceed the enumeration budget", plan.num_actions)));
    }
    if h >= plan.horizon() || x >= plan.v[0].len() {
        return Err(invalid(format!("(h={h}, x={x}) out of range")));
    }
    Ok(argmax_first(plan.q_row(h, x)))
}

/// One agent's copy of the shared learner. Replicas differ only in the
/// rewards they hold for episodes after the last sync.
#[derive(Clone, Debug)]
pub struct JointLearnerState {
    pub replica: usize,
    pub agents: usize,
    pub steps: Vec<JointStep>,
    pub last_sync: usize,
    ridge: f64,
}

impl JointLearnerState {
    pub fn new(replica: usize, agents: usize, dim: usize, horizon: usize, ridge: f64) -> Result<Self> {
        if agents == 0 || horizon == 0 {
            return Err(invalid("need at least one agent and one step"));
        }
        if replica >= agents {
            return Err(invalid(format!("replica {replica} out of range for {agents} agents")));
        }
        let steps = (0..horizon).map(|_| JointStep::new(dim, ridge)).collect::<Result<_>>()?;
        Ok(Self { replica, agents, steps, last_sync: 0, ridge })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].snapshot.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Adds `ΦΦᵀ` to `δΛ^h`, buffers the own reward and reports whether the
    /// trigger `ln det(Λ + δΛ) − ln det(Λ_{k_t}) ≥ ln S` fires. A threshold
    /// `S ≤ 1` fires on every observation.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_and_check(
        &mut self,
        episode: usize,
        h: usize,
        state: usize,
        action: usize,
        next_state: usize,
        own_reward: f64,
        phi: &DMatrix<f64>,
        threshold: f64,
    ) -> Result<bool> {
        if h >= self.horizon() {
            return Err(invalid(format!("step {h} out of range")));
        }
        if phi.nrows() != self.dim() || phi.ncols() != self.agents {
            return Err(invalid("joint feature has the wrong shape"));
        }
        if !own_reward.is_finite() {
            return Err(invalid("non-finite reward"));
        }
        if episode <= self.last_sync {
            return Err(invalid("transition predates the last synchronization"));
        }
        let step = &mut self.steps[h];
        if step.unsynced.iter().any(|r| r.episode == episode) {
            return Err(invalid(format!("duplicate transition for episode {episode} step {h}")));
        }
        for m in 0..self.agents {
            step.current.rank_one_update(&phi.column(m).into_owned())?;
        }
        step.pending += phi * phi.transpose();
        step.unsynced.push(PendingRecord { episode, state, action, next_state, own_reward });
        Ok(threshold <= 1.0 || step.log_det_growth() >= threshold.ln())
    }

    fn bonus_table(&mut self, h: usize, phis: &[DMatrix<f64>], form: BonusForm) -> Result<Vec<f64>> {
        let last_sync = self.last_sync;
        let step = &mut self.steps[h];
        if let Some((at, f, table)) = &step.bonus_cache {
            if *at == last_sync && *f == form {
                return Ok(table.clone());
            }
        }
        let table = phis
            .iter()
            .map(|phi| {
                let gram = step.snapshot.inverse_quadratic_form(phi)?;
                let top = if gram.nrows() == 1 { gram[(0, 0)] } else { max_eigenvalue(&gram) }.max(0.0);
                Ok(match form {
                    BonusForm::Spectral => top,
                    BonusForm::SqrtSpectral => top.sqrt(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        step.bonus_cache = Some((last_sync, form, table.clone()));
        Ok(table)
    }

    /// Scalarized LSVI over the synchronized history only.
    pub fn plan_scalarized(
        &mut self,
        phis: &[DMatrix<f64>],
        num_states: usize,
        upsilon: &[f64],
        beta: f64,
        form: BonusForm,
    ) -> Result<JointPlan> {
        crate::env::mmdp::check_simplex(upsilon, self.agents)?;
        if num_states == 0 || !phis.len().is_multiple_of(num_states) {
            return Err(invalid("joint feature table does not match the state count"));
        }
        let num_actions = phis.len() / num_states;
        let horizon = self.horizon();
        let dim = self.dim();
        let mut q = vec![Vec::new(); horizon];
        let mut v = vec![vec![0.0; num_states]; horizon + 1];
        let mut weights = vec![DVector::zeros(dim); horizon];
        for h in (0..horizon).rev() {
            let bonus = self.bonus_table(h, phis, form)?;
            let step = &self.steps[h];
            let mut acc = DesignAccumulator::new(dim, 1)?;
            for rec in &step.history {
                let phi = &phis[rec.state * num_actions + rec.action];
                let future = v[h + 1][rec.next_state];
                for (m, r) in rec.rewards.iter().enumerate() {
                    acc.add_scalar(&phi.column(m).into_owned(), r + future)?;
                }
            }
            let w = step.snapshot.ridge_solve(&acc)?.column(0).into_owned();
            let cap = (horizon - h) as f64;
            let q_h: Vec<f64> = phis
                .iter()
                .zip(&bonus)
                .map(|(phi, b)| {
                    let mean: f64 = (phi.transpose() * &w).iter().zip(upsilon).map(|(p, u)| p * u).sum();
                    (mean + beta * b).clamp(0.0, cap)
                })
                .collect();
            for x in 0..num_states {
                v[h][x] = q_h[x * num_actions..(x + 1) * num_actions].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            weights[h] = w;
            q[h] = q_h;
        }
        Ok(JointPlan { upsilon: upsilon.to_vec(), beta, num_actions, q, v, weights })
    }

    /// Hash of everything planning depends on.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.last_sync as u64).to_le_bytes());
        for step in &self.steps {
            hasher.update(step.hasher.clone().finalize());
            for v in step.snapshot.matrix().iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Largest entrywise gap between `Λ^h` and `λI + Σ ΦΦᵀ` over the history.
    pub fn snapshot_drift(&self, phis: &[DMatrix<f64>], num_actions: usize) -> f64 {
        self.steps
            .iter()
            .map(|step| {
                let mut m = DMatrix::identity(self.dim(), self.dim()) * self.ridge;
                for rec in &step.history {
                    let phi = &phis[rec.state * num_actions + rec.action];
                    m += phi * phi.transpose();
                }
                (m - step.snapshot.matrix()).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Scalar counts for one reward exchange.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardSyncReport {
    pub episode: usize,
    pub episodes_since_sync: usize,
    /// Unsynced transitions per step.
    pub records: Vec<usize>,
    pub uploads: usize,
    pub downloads: usize,
    /// `M · Σ_h records`.
    pub upload_scalars: usize,
    /// `(M − 1) · Σ_h records` for each replica.
    pub download_scalars_per_replica: usize,
}

impl RewardSyncReport {
    pub fn download_scalars(&self) -> usize {
        self.download_scalars_per_replica * self.uploads
    }

    pub fn payload_scalars(&self) -> usize {
        self.upload_scalars + self.download_scalars()
    }
}

/// Exchanges every replica's buffered rewards, appends full joint records to
/// the history, and advances the planning snapshot to `Λ + δΛ`.
pub fn sync_rewards(replicas: &mut [JointLearnerState], episode: usize) -> Result<RewardSyncReport> {
    let Some(first) = replicas.first() else {
        return Err(protocol("reward sync with no replicas"));
    };
    let m = first.agents;
    if replicas.len() != m || replicas.iter().enumerate().any(|(i, r)| r.replica != i) {
        return Err(protocol("need exactly one replica per agent, in agent order"));
    }
    let horizon = first.horizon();
    let last = first.last_sync;
    if replicas.iter().any(|r| r.horizon() != horizon || r.last_sync != last) {
        return Err(protocol("replicas disagree on steps or last sync"));
    }
    if episode <= last {
        return Err(protocol(format!("sync at episode {episode} does not follow {last}")));
    }
    let mut report = RewardSyncReport {
        episode,
        episodes_since_sync: episode - last,
        records: Vec::with_capacity(horizon),
        uploads: m,
        downloads: m,
        ..Default::default()
    };
    for h in 0..horizon {
        let reference = &replicas[0].steps[h].unsynced;
        for r in replicas.iter().skip(1) {
            let other = &r.steps[h].unsynced;
            if other.len() != reference.len() {
                return Err(protocol(format!("replica {} is missing reward records at step {h}", r.replica)));
            }
            let same_path = other.iter().zip(reference).all(|(a, b)| {
                (a.episode, a.state, a.action, a.next_state) == (b.episode, b.state, b.action, b.next_state)
            });
            if !same_path {
                return Err(protocol(format!("replica {} observed a different joint path at step {h}", r.replica)));
            }
        }
        let records: Vec<JointRecord> = (0..reference.len())
            .map(|i| {
                let base = &replicas[0].steps[h].unsynced[i];
                JointRecord {
                    episode: base.episode,
                    state: base.state,
                    action: base.action,
                    next_state: base.next_state,
                    rewards: replicas.iter().map(|r| r.steps[h].unsynced[i].own_reward).collect(),
                }
            })
            .collect();
        report.records.push(records.len());
        for r in replicas.iter_mut() {
            let step = &mut r.steps[h];
            for rec in &records {
                step.hasher.update((rec.episode as u64).to_le_bytes());
                for v in [rec.state, rec.action, rec.next_state] {
                    step.hasher.update((v as u64).to_le_bytes());
                }
                for v in &rec.rewards {
                    step.hasher.update(v.to_bits().to_le_bytes());
                }
            }
            step.history.extend(records.iter().cloned());
            step.snapshot = step.current.clone();
            step.pending.fill(0.0);
            step.unsynced.clear();
        }
    }
    for r in replicas.iter_mut() {
        r.last_sync = episode;
    }
    let total: usize = report.records.iter().sum();
    report.upload_scalars = m * total;
    report.download_scalars_per_replica = (m - 1) * total;
    let digest = replicas[0].digest();
    if replicas.iter().any(|r| r.digest() != digest) {
        return Err(protocol("replicas diverged after reward sync"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_mmdp, MmdpShape};

    fn replicas(m: usize, dim: usize, horizon: usize) -> Vec<JointLearnerState> {
        (0..m).map(|i| JointLearnerState::new(i, m, dim, horizon, 1.0).unwrap()).collect()
    }

    #[test]
    fn empty_history_is_pure_bonus() {
        let spec = generate_mmdp(&MmdpShape::new(vec![2, 2], vec![2, 1], 2, 2, 2), 1).unwrap();
        let phis = spec.phi_matrices();
        let mut r = replicas(2, 4, 2).remove(0);
        let plan = r.plan_scalarized(&phis, 4, &[0.5, 0.5], 1.3, BonusForm::Spectral).unwrap();
        for h in 0..2 {
            assert_eq!(plan.weights[h], DVector::zeros(4));
            for (z, phi) in phis.iter().enumerate() {
                let gram = phi.transpose() * phi;
                let expect = (1.3 * max_eigenvalue(&gram)).min((2 - h) as f64);
                assert!((plan.q[h][z] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trigger_on_unit_column() {
        // d = 2, one column e₁: growth ln 2.
        let mut r = JointLearnerState::new(0, 1, 2, 1, 1.0).unwrap();
        let phi = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(r.observe_and_check(1, 0, 0, 0, 0, 0.5, &phi, 1.9).unwrap());
        let mut r = JointLearnerState::new(0, 1, 2, 1, 1.0).unwrap();
        assert!(!r.observe_and_check(1, 0, 0, 0, 0, 0.5, &phi, 2.1).unwrap());
        let mut r = JointLearnerState::new(0, 1, 2, 1, 1.0).unwrap();
        let tiny = DMatrix::from_column_slice(2, 1, &[1e-6, 0.0]);
        assert!(r.observe_and_check(1, 0, 0, 0, 0, 0.5, &tiny, 1.0).unwrap());
    }

    #[test]
    fn sync_counts_and_recomputation() {
        let spec = generate_mmdp(&MmdpShape::new(vec![2, 1, 2], vec![1, 2, 1], 2, 2, 3), 5).unwrap();
        let phis = spec.phi_matrices();
        let mut reps = replicas(3, 5, 2);
        for t in 1..=5 {
            for h in 0..2 {
                let (x, a, next) = ((t + h) % 4, t % 2, (t * 3 + h) % 4);
                let z = x * 2 + a;
                for r in reps.iter_mut() {
                    let own = spec.reward(h, r.replica, x, a);
                    r.observe_and_check(t, h, x, a, next, own, &phis[z], 100.0).unwrap();
                }
            }
        }
        let report = sync_rewards(&mut reps, 5).unwrap();
        assert_eq!(report.upload_scalars, 3 * 5 * 2);
        assert_eq!(report.download_scalars_per_replica, 2 * 5 * 2);
        for r in &reps {
            assert!(r.snapshot_drift(&phis, 2) < 1e-9);
            assert_eq!(r.steps[0].history.len(), 5);
            assert_eq!(r.digest(), reps[0].digest());
        }
        let rec = &reps[0].steps[1].history[2];
        for m in 0..3 {
            assert_eq!(rec.rewards[m], spec.reward(1, m, rec.state, rec.action));
        }
    }

    #[test]
    fn single_agent_payload() {
        let mut reps = replicas(1, 2, 3);
        let phi = DMatrix::from_column_slice(2, 1, &[0.6, 0.0]);
        for t in 1..=4 {
            for h in 0..3 {
                reps[0].observe_and_check(t, h, 0, 0, 0, 0.1, &phi, 50.0).unwrap();
            }
        }
        let report = sync_rewards(&mut reps, 4).unwrap();
        assert_eq!(report.upload_scalars, 3 * 4);
        assert_eq!(report.download_scalars(), 0);
    }

    #[test]
    fn missing_records_are_a_protocol_violation() {
        let mut reps = replicas(2, 2, 1);
        let phi = DMatrix::from_column_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        reps[0].observe_and_check(1, 0, 0, 0, 0, 0.1, &phi, 2.0).unwrap();
        assert!(matches!(sync_rewards(&mut reps, 1), Err(crate::Error::ProtocolViolation(_))));
    }

    #[test]
    fn no_observation_no_trigger() {
        let r = JointLearnerState::new(0, 2, 3, 2, 1.0).unwrap();
        assert_eq!(r.steps[0].log_det_growth(), 0.0);
    }

    #[test]
    fn joint_greedy_ties_and_budget() {
        let mut plan = JointPlan {
            upsilon: vec![1.0],
            beta: 0.0,
            num_actions: 3,
            q: vec![vec![0.2, 0.2, 0.2, 0.1, 0.4, 0.3]],
            v: vec![vec![0.2, 0.4], vec![0.0, 0.0]],
            weights: vec![DVector::zeros(1)],
        };
        assert_eq!(act_joint_greedy(&plan, 0, 0).unwrap(), 0);
        assert_eq!(act_joint_greedy(&plan, 0, 1).unwrap(), 1);
        plan.num_actions = JOINT_BUDGET + 1;
        assert!(act_joint_greedy(&plan, 0, 0).is_err());
    }
}
