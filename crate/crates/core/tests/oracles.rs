mod common;

use common::{mean, mmdp_batch_gap, parallel_batch_gap, regret_ledger};
use coop_lsvi::coop_mmdp::{run_mmdp, run_mmdp_with, BonusForm, MmdpRunConfig, SamplerSpec};
use coop_lsvi::coop_parallel::{run_parallel, run_parallel_with, BetaSchedule, FeatureTable, ParallelRunConfig, SyncPolicy};
use coop_lsvi::env::{
    build_contextual_set, generate_linear_mdp, generate_mmdp, perturb_small_deviation, ContextualShape, LinearMdpSpec,
    MmdpShape, MmdpSpec, ParallelEnvSet,
};
use coop_lsvi::harness::{run_baselines, ExperimentConfig};
use coop_lsvi::metrics::{record_mmdp_regret, MmdpOracle, MmdpRegretLedger};

fn check_parallel_batch(set: &ParallelEnvSet, cfg: &ParallelRunConfig) {
    let features = FeatureTable::for_set(set).unwrap();
    let beta = BetaSchedule::for_set(set, cfg.c_beta, cfg.episodes).unwrap();
    let streams: Vec<u64> = (0..set.agents as u64).collect();
    let mut checked = 0;
    run_parallel_with(set, cfg, &beta, &streams, |_, agents, plans| {
        for (agent, plan) in agents.iter().zip(plans) {
            let (w, cov) = parallel_batch_gap(agent, &features, plan);
            assert!(w <= 1e-8, "weight gap {w}");
            assert!(cov <= 1e-9, "covariance gap {cov}");
            checked += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(checked, cfg.episodes * set.agents);
}

#[test]
fn shared_plan_matches_batch_solve() {
    for (seed, sync) in [(0, SyncPolicy::Threshold(2.0)), (1, SyncPolicy::Always), (2, SyncPolicy::Never)] {
        let set = ParallelEnvSet::homogeneous(generate_linear_mdp(4, 3, 3, 4, seed).unwrap(), 3).unwrap();
        check_parallel_batch(&set, &ParallelRunConfig { episodes: 30, seed, sync, ..Default::default() });
    }
    let base = generate_linear_mdp(5, 2, 2, 3, 7).unwrap();
    let set = perturb_small_deviation(&base, 0.1, 2, 7).unwrap();
    check_parallel_batch(&set, &ParallelRunConfig { episodes: 30, seed: 7, sync: SyncPolicy::Threshold(1.0), ..Default::default() });
}

#[test]
fn contextual_plan_matches_batch_solve() {
    let shape = ContextualShape {
        num_states: 4,
        num_actions: 2,
        horizon: 3,
        base_dim: 3,
        context_dim: 2,
        agents: 3,
        target_rank: 2,
    };
    let set = build_contextual_set(shape, 11).unwrap();
    check_parallel_batch(&set, &ParallelRunConfig { episodes: 30, seed: 3, sync: SyncPolicy::Threshold(2.0), ..Default::default() });
}

#[test]
fn scalarized_plan_matches_batch_solve() {
    let spec = generate_mmdp(&MmdpShape::new(vec![2, 2], vec![2, 1], 3, 2, 3), 5).unwrap();
    let phis = spec.phi_matrices();
    for threshold in [1.0, 1.5, 4.0] {
        let cfg = MmdpRunConfig { episodes: 30, threshold, seed: 2, ..Default::default() };
        run_mmdp_with(&spec, &cfg, |_, replicas, plan| {
            for r in replicas {
                let gap = mmdp_batch_gap(r, &phis, plan);
                assert!(gap <= 1e-8, "gap {gap}");
                assert!(r.snapshot_drift(&phis, plan.num_actions) < 1e-9);
            }
            Ok(())
        })
        .unwrap();
    }
}

fn assert_bitwise(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

/// Isolated agents never communicate, so the never-sync group equals M
/// single-agent runs on the same streams and β schedule.
#[test]
fn never_sync_equals_independent_runs() {
    let base = generate_linear_mdp(5, 3, 3, 4, 3).unwrap();
    for set in [ParallelEnvSet::homogeneous(base.clone(), 3).unwrap(), perturb_small_deviation(&base, 0.05, 3, 1).unwrap()] {
        let cfg = ParallelRunConfig { episodes: 60, seed: 9, sync: SyncPolicy::Never, ..Default::default() };
        let group = regret_ledger(&set, &run_parallel(&set, &cfg).unwrap());
        let beta = BetaSchedule::for_set(&set, cfg.c_beta, cfg.episodes).unwrap();
        for m in 0..set.agents {
            let single = ParallelEnvSet::homogeneous(set.specs[m].clone(), 1).unwrap();
            let trace = run_parallel_with(&single, &cfg, &beta, &[m as u64], |_, _, _| Ok(())).unwrap();
            let own = regret_ledger(&single, &trace);
            let a: Vec<f64> = group.rows.iter().map(|r| r.agent_regret[m]).collect();
            let b: Vec<f64> = own.rows.iter().map(|r| r.agent_regret[0]).collect();
            assert_bitwise(&a, &b);
        }
    }
}

#[test]
fn single_agent_baselines_coincide() {
    let cfg = ExperimentConfig::default().with_overrides([("agents", "1"), ("episodes", "40")]).unwrap();
    let report = run_baselines(&cfg).unwrap();
    let curves: Vec<Vec<f64>> = report.runs().iter().map(|(_, r)| r.regret.cumulative_curve()).collect();
    assert_bitwise(&curves[0], &curves[1]);
    assert_bitwise(&curves[0], &curves[2]);
}

#[test]
fn sync_extremes_order_paired_seeds() {
    let (mut never, mut always) = (Vec::new(), Vec::new());
    let mut between = 0;
    for seed in 0..10 {
        let cfg = ExperimentConfig::default()
            .with_overrides([("episodes", "300"), ("seed", &seed.to_string()), ("env.seed", "0")])
            .unwrap();
        let report = run_baselines(&cfg).unwrap();
        let finals: Vec<f64> = report.runs().iter().map(|(_, r)| *r.regret.cumulative_curve().last().unwrap()).collect();
        never.push(finals[0]);
        always.push(finals[1]);
        let (lo, hi) = (finals[0].min(finals[1]), finals[0].max(finals[1]));
        if finals[2] >= lo - 1e-9 && finals[2] <= hi + 1e-9 {
            between += 1;
        }
    }
    assert!(mean(&always) <= mean(&never) + 1e-9, "{} vs {}", mean(&always), mean(&never));
    assert!(between >= 7, "{between}");
}

/// The one-agent MMDP as a linear MDP with features `[φ₁; φ_c]`.
fn as_linear(spec: &MmdpSpec) -> LinearMdpSpec {
    let (d1, d2) = (spec.reward_feat_dim, spec.trans_feat_dim);
    let s = spec.num_states();
    LinearMdpSpec {
        num_states: s,
        num_actions: spec.num_actions(),
        horizon: spec.horizon,
        feat_dim: d1 + d2,
        features: (0..spec.num_pairs())
            .map(|z| spec.reward_features[0][z].iter().chain(&spec.common_features[z]).copied().collect())
            .collect(),
        measures: spec
            .measures
            .iter()
            .map(|mu| std::iter::repeat_n(vec![0.0; s], d1).chain(mu.iter().cloned()).collect())
            .collect(),
        reward_weights: spec.reward_weights.iter().map(|th| th.iter().copied().chain(std::iter::repeat_n(0.0, d2)).collect()).collect(),
    }
}

#[test]
fn single_agent_mmdp_reduces_to_parallel_plan() {
    let spec = generate_mmdp(&MmdpShape::new(vec![4], vec![3], 3, 2, 3), 8).unwrap();
    let set = ParallelEnvSet::homogeneous(as_linear(&spec), 1).unwrap();
    let episodes = 40;
    let mut parallel_weights = Vec::new();
    let pcfg = ParallelRunConfig { episodes, seed: 4, sync: SyncPolicy::Always, ..Default::default() };
    let beta = BetaSchedule::for_set(&set, 1.0, episodes).unwrap();
    let ptrace = run_parallel_with(&set, &pcfg, &beta, &[0], |_, _, plans| {
        parallel_weights.push(plans[0].weights.clone());
        Ok(())
    })
    .unwrap();
    let mcfg = MmdpRunConfig {
        episodes,
        seed: 4,
        threshold: 1.0,
        bonus: BonusForm::SqrtSpectral,
        sampler: SamplerSpec::PointMass { upsilon: vec![1.0] },
        ..Default::default()
    };
    let mut t = 0;
    let mtrace = run_mmdp_with(&spec, &mcfg, |_, _, plan| {
        for (a, b) in plan.weights.iter().zip(&parallel_weights[t]) {
            assert!((a - b).amax() < 1e-8);
        }
        t += 1;
        Ok(())
    })
    .unwrap();
    for (p, m) in ptrace.episodes.iter().zip(&mtrace.episodes) {
        assert_eq!(p.start_states[0], m.start_state);
        assert_eq!(p.policies[0], m.policy);
    }
}

#[test]
fn point_mass_regret_is_single_objective_regret() {
    let spec = generate_mmdp(&MmdpShape::new(vec![2, 2], vec![2, 2], 2, 2, 2), 1).unwrap();
    let u = vec![0.3, 0.7];
    let cfg = MmdpRunConfig { episodes: 30, sampler: SamplerSpec::PointMass { upsilon: u.clone() }, ..Default::default() };
    let trace = run_mmdp(&spec, &cfg).unwrap();
    let mut oracle = MmdpOracle::new(&spec).unwrap();
    let mut ledger = MmdpRegretLedger::new(2);
    for e in &trace.episodes {
        record_mmdp_regret(&mut ledger, &mut oracle, e.episode, &e.upsilon, &e.policy, e.start_state).unwrap();
    }
    assert_eq!(oracle.misses, 1);
    let single = spec.joint_model().unwrap().scalarized(&u).unwrap();
    let v_star = single.solve().v_star;
    for (row, e) in ledger.rows.iter().zip(&trace.episodes) {
        let v = single.evaluate(&e.policy).unwrap();
        assert!((row.fixed_start - (v_star[0][e.start_state] - v[0][e.start_state])).abs() < 1e-12);
        assert!(row.max_over_states >= row.fixed_start);
    }
}
