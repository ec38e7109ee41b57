//! Configuration, experiment orchestration, baselines and sweeps.

mod config;
mod run;

pub use config::{AlgoConfig, EnvConfig, ExperimentConfig, Mode};
pub use run::{
    build_environment, emit_report, resolve_output_dir, run_baselines, run_experiment, run_on, sublinearity_ratio,
    sweep, verify_run_dir, write_artifacts, write_sweep_table, BaselineReport, CommTotals, Environment, RegretRecord,
    RunArtifacts, Summary, SweepPoint, VerifyReport, ViolationCounts, CODE_VERSION, COMM_FILE, CONFIG_FILE,
    EVENTS_FILE, REGRET_FILE, SUMMARY_FILE,
};
