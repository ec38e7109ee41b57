use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coop_lsvi::env::SpecDocument;
use coop_lsvi::harness::{
    build_environment, resolve_output_dir, run_baselines, run_experiment, sweep, verify_run_dir, write_artifacts,
    ExperimentConfig, Summary, SUMMARY_FILE,
};

/// Output root for every run directory.
const OUT_VAR: &str = "COOP_LSVI_OUT";

#[derive(Parser)]
#[command(name = "coop-lsvi", version, about = "Cooperative LSVI simulator with exact regret and communication ledgers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an environment spec (or the one a config generates).
    Validate {
        /// Spec document to check instead of the config's environment.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one experiment.
    Run(ConfigArgs),
    /// Never-sync, always-sync and threshold runs on one environment.
    Baselines(ConfigArgs),
    /// Grid over one config key and several seeds.
    Sweep {
        /// Config key to vary, e.g. `algo.sync` or `env.xi`.
        #[arg(long)]
        over: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-run bound and ledger checks on stored run directories.
    Verify {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, e.g. `--algo.c_beta 0.5 --episodes 400`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::read(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let pairs = parse_overrides(&self.overrides)?;
        Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let Some(key) = tok.strip_prefix("--") else {
            bail!("expected `--key value`, got `{tok}`");
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let value = it.next().with_context(|| format!("missing value for `--{key}`"))?;
            out.push((key.to_string(), value.clone()));
        }
    }
    Ok(out)
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn print_summary(label: &str, dir: &Path, s: &Summary) {
    println!(
        "{label}: {} regret={:.6} syncs={} bound={:.3} ({}) optimism={:.4} violations={} -> {}",
        if s.ok { "OK" } else { "FAIL" },
        s.final_regret,
        s.comm.sync_episodes,
        s.bound.bound,
        if s.bound.pass { "pass" } else { "fail" },
        s.optimism_frequency,
        s.total_violations,
        dir.display()
    );
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(SUMMARY_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    entries.sort();
    for e in entries {
        find_runs(&e, out)?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate { spec, cfg } => {
            let report = match spec {
                Some(path) => SpecDocument::read(&path)?.body.validate(),
                None => build_environment(&cfg.load()?)?.validate(),
            };
            for v in &report.violations {
                println!("{:?}: {}", v.kind, v.message);
            }
            println!("{} violations", report.violations.len());
            Ok(report.is_valid())
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let dir = resolve_output_dir(&cfg, &out_root());
            let summary = write_artifacts(&run_experiment(&cfg)?, &dir)?;
            print_summary("run", &dir, &summary);
            Ok(summary.ok)
        }
        Command::Baselines(args) => {
            let cfg = args.load()?;
            let dir = resolve_output_dir(&cfg, &out_root());
            let report = run_baselines(&cfg)?;
            let summaries = report.write(&dir)?;
            let mut ok = true;
            for ((name, _), s) in report.runs().iter().zip(&summaries) {
                print_summary(name, &dir.join(name), s);
                ok &= s.ok;
            }
            Ok(ok)
        }
        Command::Sweep { over, values, seeds, cfg } => {
            let cfg = cfg.load()?;
            let dir = resolve_output_dir(&cfg, &out_root());
            std::fs::create_dir_all(&dir)?;
            let points = sweep(&cfg, &over, &values, &seeds, Some(&dir))?;
            for p in &points {
                let run_dir = dir.join(format!("{over}={}", p.value)).join(format!("seed-{}", p.seed));
                print_summary(&format!("{over}={} seed={}", p.value, p.seed), &run_dir, &p.summary);
            }
            Ok(points.iter().all(|p| p.summary.ok))
        }
        Command::Verify { dirs } => {
            let mut runs = Vec::new();
            for d in &dirs {
                find_runs(d, &mut runs).with_context(|| format!("scanning {}", d.display()))?;
            }
            if runs.is_empty() {
                bail!("no run directories found");
            }
            let mut ok = true;
            for run in runs {
                let r = verify_run_dir(&run)?;
                println!(
                    "{}: {} measured={} bound={:.3} regret_ledger={} comm_ledger={}",
                    run.display(),
                    if r.pass { "PASS" } else { "FAIL" },
                    r.bound.measured,
                    r.bound.bound,
                    if r.regret_consistent { "ok" } else { "bad" },
                    if r.comm_consistent { "ok" } else { "bad" },
                );
                for m in &r.messages {
                    println!("  {m}");
                }
                ok &= r.pass;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
