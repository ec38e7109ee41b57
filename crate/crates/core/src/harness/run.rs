use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::coop_mmdp::{run_mmdp, MmdpRunConfig};
use crate::coop_parallel::{run_parallel, EpisodeEvent, ParallelRunConfig, SyncPolicy};
use crate::env::{
    build_contextual_set, generate_linear_mdp, generate_mmdp, perturb_small_deviation, AnySpec, ContextualShape,
    MmdpShape, MmdpSpec, ParallelEnvSet, SpecDocument, ValidationReport,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{
    estimate_bayes_regret, record_mmdp_regret, record_parallel_regret, verify_comm_bounds, BayesEstimate, BoundParams,
    BoundVerdict, CommLedger, MmdpOracle, MmdpRegretLedger, ParallelOracle, RegretLedger,
};

/// Tag written into every summary.
pub const CODE_VERSION: &str = concat!("coop-lsvi ", env!("CARGO_PKG_VERSION"));

pub const CONFIG_FILE: &str = "config.json";
pub const REGRET_FILE: &str = "regret.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq)]
pub enum Environment {
    Parallel(ParallelEnvSet),
    Mmdp(MmdpSpec),
}

impl Environment {
    pub fn validate(&self) -> ValidationReport {
        match self {
            Environment::Parallel(s) => s.validate(),
            Environment::Mmdp(s) => s.validate(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Environment::Parallel(s) => s.horizon(),
            Environment::Mmdp(s) => s.horizon,
        }
    }
}

fn spec_mismatch(message: &str) -> Error {
    Error::Config { path: "env.spec_path".into(), message: message.into() }
}

/// The environment a config describes, generated or loaded.
pub fn build_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    let e = &cfg.env;
    let seed = cfg.env_seed();
    if let Some(path) = &e.spec_path {
        let doc = SpecDocument::read(path)?;
        return match (cfg.mode, doc.body) {
            (Mode::Mmdp, AnySpec::Mmdp(s)) => Ok(Environment::Mmdp(s)),
            (Mode::Mmdp, _) => Err(spec_mismatch("MMDP mode needs an mmdp spec")),
            (_, AnySpec::Linear(s)) => Ok(Environment::Parallel(ParallelEnvSet::homogeneous(s, e.agents)?)),
            (_, AnySpec::Parallel(s)) => Ok(Environment::Parallel(s)),
            (_, AnySpec::Mmdp(_)) => Err(spec_mismatch("parallel modes need a linear or parallel spec")),
        };
    }
    Ok(match cfg.mode {
        Mode::ParallelHomogeneous => Environment::Parallel(ParallelEnvSet::homogeneous(
            generate_linear_mdp(e.num_states, e.num_actions, e.horizon, e.feat_dim, seed)?,
            e.agents,
        )?),
        Mode::ParallelSmallDev => {
            let base = generate_linear_mdp(e.num_states, e.num_actions, e.horizon, e.feat_dim, seed)?;
            Environment::Parallel(perturb_small_deviation(&base, e.xi, e.agents, seed)?)
        }
        Mode::ParallelContextual => Environment::Parallel(build_contextual_set(
            ContextualShape {
                num_states: e.num_states,
                num_actions: e.num_actions,
                horizon: e.horizon,
                base_dim: e.feat_dim,
                context_dim: e.context_dim,
                agents: e.agents,
                target_rank: e.target_rank,
            },
            seed,
        )?),
        Mode::Mmdp => Environment::Mmdp(generate_mmdp(
            &MmdpShape::new(e.state_sizes.clone(), e.action_sizes.clone(), e.horizon, e.reward_feat_dim, e.trans_feat_dim),
            seed,
        )?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ledger", rename_all = "snake_case")]
pub enum RegretRecord {
    Parallel(RegretLedger),
    Mmdp(MmdpRegretLedger),
}

impl RegretRecord {
    /// `ℜ(t)` for `t = 1..=T` (max-over-states for MMDPs).
    pub fn cumulative_curve(&self) -> Vec<f64> {
        match self {
            RegretRecord::Parallel(l) => l.rows.iter().map(|r| r.cumulative).collect(),
            RegretRecord::Mmdp(l) => l.rows.iter().map(|r| r.cumulative).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            RegretRecord::Parallel(l) => l.write_csv(out),
            RegretRecord::Mmdp(l) => l.write_csv(out),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub weight_norm: u64,
    pub clip: u64,
    pub covariance: u64,
    pub replica: u64,
}

impl ViolationCounts {
    pub fn total(&self) -> u64 {
        self.weight_norm + self.clip + self.covariance + self.replica
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub regret: RegretRecord,
    pub comm: CommLedger,
    pub events: Vec<EpisodeEvent>,
    pub bound_params: BoundParams,
    pub optimism_frequency: f64,
    pub max_weight_ratio: f64,
    pub violations: ViolationCounts,
    pub bayes: Option<BayesEstimate>,
    pub agents: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommTotals {
    pub sync_episodes: usize,
    pub uploads: usize,
    pub downloads: usize,
    pub payload_scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub code_version: String,
    pub mode: Mode,
    pub episodes: usize,
    pub agents: usize,
    /// `ℜ(T)`, or `ℜ_C(T)` for MMDPs.
    pub final_regret: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_regret_fixed_start: Option<f64>,
    /// `ℜ(T) / ℜ(⌊T/2⌋)`.
    pub sublinearity_ratio: Option<f64>,
    pub comm: CommTotals,
    pub bound_params: BoundParams,
    pub bound: BoundVerdict,
    pub optimism_frequency: f64,
    pub max_weight_ratio: f64,
    pub violations: ViolationCounts,
    pub total_violations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes_regret: Option<BayesEstimate>,
    /// `ℜ_C(T) / T`, the quantity the Bayes regret is compared against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_regret: Option<f64>,
    pub ok: bool,
}

/// `ℜ(T) / ℜ(⌊T/2⌋)` from a cumulative curve; `None` when undefined.
pub fn sublinearity_ratio(cumulative: &[f64]) -> Option<f64> {
    let t = cumulative.len();
    if t < 2 {
        return None;
    }
    let half = cumulative[t / 2 - 1];
    (half > 0.0).then(|| cumulative[t - 1] / half)
}

fn mmdp_threshold(sync: SyncPolicy) -> Result<f64> {
    match sync {
        SyncPolicy::Threshold(s) => Ok(s),
        SyncPolicy::Always => Ok(1.0),
        SyncPolicy::Never => Err(invalid("MMDP runs need a threshold or \"always\"")),
    }
}

/// Plans, acts, syncs and books every episode; a pure function of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.check()?;
    let env = build_environment(cfg)?;
    let report = env.validate();
    if !report.is_valid() {
        return Err(invalid(format!("environment fails validation with {} violations", report.violations.len())));
    }
    run_on(cfg, &env)
}

/// As [`run_experiment`] on an already built environment.
pub fn run_on(cfg: &ExperimentConfig, env: &Environment) -> Result<RunArtifacts> {
    let a = &cfg.algo;
    match env {
        Environment::Parallel(set) => {
            let run_cfg = ParallelRunConfig {
                episodes: a.episodes,
                ridge: a.ridge,
                c_beta: a.c_beta,
                sync: a.sync,
                seed: cfg.seed,
                check_covariance: a.check_covariance,
            };
            let trace = run_parallel(set, &run_cfg)?;
            let oracle = ParallelOracle::new(set)?;
            let mut ledger = RegretLedger::new(set.agents);
            for e in &trace.episodes {
                record_parallel_regret(&mut ledger, &oracle, e.episode, &e.policies, &e.start_states)?;
            }
            let d = &trace.diagnostics;
            Ok(RunArtifacts {
                config: cfg.clone(),
                regret: RegretRecord::Parallel(ledger),
                comm: CommLedger::from_parallel(&trace, set.horizon())?,
                events: trace.events(),
                bound_params: BoundParams::Parallel {
                    dim: set.feat_dim(),
                    horizon: set.horizon(),
                    episodes: a.episodes,
                    agents: set.agents,
                    sync: a.sync,
                },
                optimism_frequency: d.optimism_frequency(),
                max_weight_ratio: d.max_weight_ratio,
                violations: ViolationCounts {
                    weight_norm: d.weight_violations,
                    clip: d.clip_violations,
                    covariance: d.covariance_violations,
                    replica: 0,
                },
                bayes: None,
                agents: set.agents,
            })
        }
        Environment::Mmdp(spec) => {
            let threshold = mmdp_threshold(a.sync)?;
            let run_cfg = MmdpRunConfig {
                episodes: a.episodes,
                ridge: a.ridge,
                c_beta: a.c_beta,
                threshold,
                seed: cfg.seed,
                sampler: a.sampler.clone(),
                bonus: a.bonus,
                start_state: a.start_state,
                replica_checks: a.replica_checks,
                check_optimism: true,
            };
            let trace = run_mmdp(spec, &run_cfg)?;
            let mut oracle = MmdpOracle::new(spec)?;
            let mut ledger = MmdpRegretLedger::new(spec.agents);
            for e in &trace.episodes {
                record_mmdp_regret(&mut ledger, &mut oracle, e.episode, &e.upsilon, &e.policy, e.start_state)?;
            }
            let bayes = if a.bayes_samples > 0 && !trace.episodes.is_empty() {
                let policies: Vec<_> = trace.episodes.iter().map(|e| e.policy.clone()).collect();
                Some(estimate_bayes_regret(&mut oracle, &policies, &a.sampler, a.bayes_samples, cfg.seed)?)
            } else {
                None
            };
            let d = &trace.diagnostics;
            Ok(RunArtifacts {
                config: cfg.clone(),
                regret: RegretRecord::Mmdp(ledger),
                comm: CommLedger::from_mmdp(&trace, spec.horizon)?,
                events: trace.events(),
                bound_params: BoundParams::Mmdp {
                    dim: spec.feat_dim(),
                    horizon: spec.horizon,
                    episodes: a.episodes,
                    agents: spec.agents,
                    threshold,
                },
                optimism_frequency: d.optimism_frequency(),
                max_weight_ratio: d.max_weight_ratio,
                violations: ViolationCounts {
                    weight_norm: d.weight_violations,
                    clip: d.clip_violations,
                    covariance: 0,
                    replica: d.replica_mismatches,
                },
                bayes,
                agents: spec.agents,
            })
        }
    }
}

pub fn emit_report(run: &RunArtifacts) -> Summary {
    let curve = run.regret.cumulative_curve();
    let bound = verify_comm_bounds(&run.comm, &run.bound_params);
    let final_regret = curve.last().copied().unwrap_or(0.0);
    let (fixed, average) = match &run.regret {
        RegretRecord::Mmdp(l) => (
            Some(l.cumulative_fixed()),
            Some(if curve.is_empty() { 0.0 } else { final_regret / curve.len() as f64 }),
        ),
        RegretRecord::Parallel(_) => (None, None),
    };
    let total = run.violations.total();
    Summary {
        code_version: CODE_VERSION.to_string(),
        mode: run.config.mode,
        episodes: curve.len(),
        agents: run.agents,
        final_regret,
        final_regret_fixed_start: fixed,
        sublinearity_ratio: sublinearity_ratio(&curve),
        comm: CommTotals {
            sync_episodes: run.comm.sync_episodes(),
            uploads: run.comm.total_uploads(),
            downloads: run.comm.total_downloads(),
            payload_scalars: run.comm.total_payload(),
        },
        bound_params: run.bound_params.clone(),
        ok: total == 0 && bound.pass,
        bound,
        optimism_frequency: run.optimism_frequency,
        max_weight_ratio: run.max_weight_ratio,
        violations: run.violations.clone(),
        total_violations: total,
        bayes_regret: run.bayes.clone(),
        average_regret: average,
    }
}

/// Writes the resolved config, ledgers, event log and summary into `dir`.
pub fn write_artifacts(run: &RunArtifacts, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), run.config.to_json()? + "\n")?;
    run.regret.write_csv(fs::File::create(dir.join(REGRET_FILE))?)?;
    run.comm.write_csv(fs::File::create(dir.join(COMM_FILE))?)?;
    let mut events = BufWriter::new(fs::File::create(dir.join(EVENTS_FILE))?);
    for e in &run.events {
        serde_json::to_writer(&mut events, e)?;
        events.write_all(b"\n")?;
    }
    events.flush()?;
    let summary = emit_report(run);
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Where a run writes: the config's `output_dir` under `root` (absolute
/// paths win), or `<mode>-seed<seed>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(p) => root.join(p),
        None => {
            let mode = serde_json::to_value(cfg.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            root.join(format!("{mode}-seed{}", cfg.seed))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bound: BoundVerdict,
    pub stored_bound: BoundVerdict,
    pub regret_consistent: bool,
    pub comm_consistent: bool,
    pub messages: Vec<String>,
    pub pass: bool,
}

/// Re-checks a stored run: the bound from `comm.csv`, prefix sums and
/// signs in `regret.csv`, totals against `summary.json`.
pub fn verify_run_dir(dir: &Path) -> Result<VerifyReport> {
    let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let comm = CommLedger::read_csv(fs::File::open(dir.join(COMM_FILE))?)?;
    let bound = verify_comm_bounds(&comm, &summary.bound_params);
    let mut messages = Vec::new();
    let totals = CommTotals {
        sync_episodes: comm.sync_episodes(),
        uploads: comm.total_uploads(),
        downloads: comm.total_downloads(),
        payload_scalars: comm.total_payload(),
    };
    let comm_consistent = totals == summary.comm;
    if !comm_consistent {
        messages.push("communication totals differ from the summary".into());
    }
    if bound != summary.bound {
        messages.push("bound verdict differs from the summary".into());
    }
    let regret_file = fs::File::open(dir.join(REGRET_FILE))?;
    let rows: Vec<(Vec<f64>, f64)> = if summary.mode == Mode::Mmdp {
        MmdpRegretLedger::read_csv(regret_file)?
            .rows
            .into_iter()
            .map(|r| (vec![r.fixed_start, r.max_over_states], r.cumulative))
            .collect()
    } else {
        RegretLedger::read_csv(regret_file)?.rows.into_iter().map(|r| (r.agent_regret, r.cumulative)).collect()
    };
    let mut running = 0.0;
    let mut regret_consistent = true;
    for (t, (instant, cumulative)) in rows.iter().enumerate() {
        if instant.iter().any(|v| *v < crate::metrics::REGRET_FLOOR) {
            regret_consistent = false;
            messages.push(format!("negative regret in row {}", t + 1));
        }
        running += if summary.mode == Mode::Mmdp { instant[1] } else { instant.iter().sum() };
        if (running - cumulative).abs() > 1e-9 * running.abs().max(1.0) {
            regret_consistent = false;
            messages.push(format!("cumulative column is not a prefix sum at row {}", t + 1));
            break;
        }
    }
    if (running - summary.final_regret).abs() > 1e-9 * running.abs().max(1.0) {
        regret_consistent = false;
        messages.push("final regret differs from the summary".into());
    }
    let pass = bound.pass && regret_consistent && comm_consistent && bound == summary.bound && summary.total_violations == 0;
    Ok(VerifyReport { stored_bound: summary.bound, bound, regret_consistent, comm_consistent, messages, pass })
}

#[derive(Clone, Debug)]
pub struct BaselineReport {
    pub never: RunArtifacts,
    pub always: RunArtifacts,
    pub threshold: RunArtifacts,
}

impl BaselineReport {
    pub fn runs(&self) -> [(&'static str, &RunArtifacts); 3] {
        [("never", &self.never), ("always", &self.always), ("threshold", &self.threshold)]
    }

    /// Aligned cumulative regret curves.
    pub fn write_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "never", "always", "threshold"])?;
        let curves: Vec<Vec<f64>> = self.runs().iter().map(|(_, r)| r.regret.cumulative_curve()).collect();
        for t in 0..curves[0].len() {
            w.write_record([(t + 1).to_string(), format!("{:?}", curves[0][t]), format!("{:?}", curves[1][t]), format!("{:?}", curves[2][t])])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<Summary>> {
        let summaries = self.runs().iter().map(|(name, run)| write_artifacts(run, &dir.join(name))).collect::<Result<_>>()?;
        self.write_curves(fs::File::create(dir.join("curves.csv"))?)?;
        Ok(summaries)
    }
}

/// Never-sync, always-sync and the configured threshold on one environment
/// and seed.
pub fn run_baselines(cfg: &ExperimentConfig) -> Result<BaselineReport> {
    if !cfg.mode.is_parallel() {
        return Err(invalid("baselines are defined for parallel modes"));
    }
    if !matches!(cfg.algo.sync, SyncPolicy::Threshold(_)) {
        return Err(invalid("baselines need a numeric sync threshold"));
    }
    cfg.check()?;
    let env = build_environment(cfg)?;
    let with = |sync: SyncPolicy| {
        let mut c = cfg.clone();
        c.algo.sync = sync;
        run_on(&c, &env)
    };
    Ok(BaselineReport { never: with(SyncPolicy::Never)?, always: with(SyncPolicy::Always)?, threshold: with(cfg.algo.sync)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub summary: Summary,
}

/// Runs `key = value` for every value and seed, in parallel, each into its
/// own directory under `dir` when given.
pub fn sweep(cfg: &ExperimentConfig, key: &str, values: &[String], seeds: &[u64], dir: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let mut jobs = Vec::new();
    for value in values {
        for seed in seeds {
            let seed_text = seed.to_string();
            let c = cfg.with_overrides([(key, value.as_str()), ("seed", seed_text.as_str())])?;
            jobs.push((value.clone(), *seed, c));
        }
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let results: Vec<Result<SweepPoint>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|batch| {
                scope.spawn(move || {
                    batch
                        .iter()
                        .map(|(value, seed, c)| {
                            let run = run_experiment(c)?;
                            let summary = match dir {
                                Some(d) => write_artifacts(&run, &d.join(format!("{key}={value}")).join(format!("seed-{seed}")))?,
                                None => emit_report(&run),
                            };
                            Ok(SweepPoint { value: value.clone(), seed: *seed, summary })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let points: Vec<SweepPoint> = results.into_iter().collect::<Result<_>>()?;
    if let Some(d) = dir {
        write_sweep_table(&points, key, fs::File::create(d.join("sweep.csv"))?)?;
    }
    Ok(points)
}

pub fn write_sweep_table<W: Write>(points: &[SweepPoint], key: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([key, "seed", "final_regret", "sublinearity_ratio", "sync_episodes", "bound", "bound_pass", "violations"])?;
    for p in points {
        let s = &p.summary;
        w.write_record([
            p.value.clone(),
            p.seed.to_string(),
            format!("{:?}", s.final_regret),
            s.sublinearity_ratio.map_or(String::new(), |r| format!("{r:?}")),
            s.comm.sync_episodes.to_string(),
            format!("{:?}", s.bound.bound),
            s.bound.pass.to_string(),
            s.total_violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
