#![allow(dead_code)]

use coop_lsvi::coop_mmdp::{JointLearnerState, JointPlan};
use coop_lsvi::coop_parallel::{AgentLearnerState, EpisodePlan, FeatureTable, ParallelTrace};
use coop_lsvi::env::ParallelEnvSet;
use coop_lsvi::metrics::{record_parallel_regret, ParallelOracle, RegretLedger};
use nalgebra::{DMatrix, DVector};

/// Normal equations solved by LU, independent of the Cholesky path.
pub fn lu_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    gram.clone().lu().solve(rhs).expect("ridge Gram is invertible")
}

/// Max-abs gap between each step's weights and a from-scratch batch solve
/// over the agent's stored transitions, plus the covariance gap.
pub fn parallel_batch_gap(agent: &AgentLearnerState, features: &FeatureTable, plan: &EpisodePlan) -> (f64, f64) {
    let na = features.num_actions();
    let d = features.dim();
    let mut w_gap: f64 = 0.0;
    let mut cov_gap: f64 = 0.0;
    for h in 0..agent.horizon() {
        let mut gram = DMatrix::<f64>::identity(d, d) * agent.ridge();
        let mut rhs = DVector::<f64>::zeros(d);
        for rec in &agent.steps[h].store {
            let phi = features.phi(rec.agent, rec.state * na + rec.action);
            gram += phi * phi.transpose();
            rhs += phi * (rec.reward + plan.v[h + 1][features.slot(rec.agent)][rec.next_state]);
        }
        let w = lu_solve(&gram, &rhs);
        w_gap = w_gap.max((w - &plan.weights[h]).amax());
        cov_gap = cov_gap.max((gram - agent.steps[h].local.matrix()).amax());
    }
    (w_gap, cov_gap)
}

/// Same for a replica's synchronized history under scalarized targets.
pub fn mmdp_batch_gap(replica: &JointLearnerState, phis: &[DMatrix<f64>], plan: &JointPlan) -> f64 {
    let d = replica.dim();
    let mut gap: f64 = 0.0;
    for h in 0..replica.horizon() {
        let mut gram = DMatrix::<f64>::identity(d, d) * replica.ridge();
        let mut rhs = DVector::<f64>::zeros(d);
        for rec in &replica.steps[h].history {
            let phi = &phis[rec.state * plan.num_actions + rec.action];
            gram += phi * phi.transpose();
            for (m, r) in rec.rewards.iter().enumerate() {
                rhs += phi.column(m) * (r + plan.v[h + 1][rec.next_state]);
            }
        }
        gap = gap.max((lu_solve(&gram, &rhs) - &plan.weights[h]).amax());
    }
    gap
}

pub fn regret_ledger(set: &ParallelEnvSet, trace: &ParallelTrace) -> RegretLedger {
    let oracle = ParallelOracle::new(set).unwrap();
    let mut ledger = RegretLedger::new(set.agents);
    for e in &trace.episodes {
        record_parallel_regret(&mut ledger, &oracle, e.episode, &e.policies, &e.start_states).unwrap();
    }
    ledger
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
