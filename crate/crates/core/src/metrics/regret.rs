use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::coop_mmdp::{SamplerSpec, ScalarizationSampler};
use crate::env::{JointModel, MmdpSpec, ParallelEnvSet, Policy, TabularMdp};
use crate::error::{invalid, protocol, Result};
use crate::rng::{self, domain};

/// Slack on "optimal value dominates".
pub const REGRET_FLOOR: f64 = -1e-9;

/// Per-episode group regret of a parallel run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub episode: usize,
    /// `V*_{m,1}(x^t_m) − V^{π_{m,t}}_{m,1}(x^t_m)`.
    pub agent_regret: Vec<f64>,
    pub group: f64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub agents: usize,
    pub rows: Vec<RegretRow>,
}

impl RegretLedger {
    pub fn new(agents: usize) -> Self {
        Self { agents, rows: Vec::new() }
    }

    pub fn cumulative(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative)
    }

    /// `ℜ(t)` for `t ≤ len`, with `ℜ(0) = 0`.
    pub fn cumulative_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.rows[t.min(self.rows.len()) - 1].cumulative
        }
    }

    pub fn push(&mut self, episode: usize, agent_regret: Vec<f64>) -> Result<()> {
        if agent_regret.len() != self.agents {
            return Err(invalid(format!("{} regrets for {} agents", agent_regret.len(), self.agents)));
        }
        if let Some(m) = agent_regret.iter().position(|r| !(*r >= REGRET_FLOOR)) {
            return Err(protocol(format!("agent {m} has regret {} at episode {episode}", agent_regret[m])));
        }
        let group: f64 = agent_regret.iter().sum();
        let cumulative = self.cumulative() + group;
        self.rows.push(RegretRow { episode, agent_regret, group, cumulative });
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["episode".to_string()];
        header.extend((0..self.agents).map(|m| format!("regret_agent_{m}")));
        header.extend(["group".into(), "cumulative".into()]);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.episode.to_string()];
            rec.extend(row.agent_regret.iter().map(|v| format_float(*v)));
            rec.extend([format_float(row.group), format_float(row.cumulative)]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let agents = r.headers()?.iter().filter(|h| h.starts_with("regret_agent_")).count();
        let mut ledger = Self::new(agents);
        for rec in r.records() {
            let rec = rec?;
            let fields: Vec<&str> = rec.iter().collect();
            if fields.len() != agents + 3 {
                return Err(invalid("regret row has the wrong width"));
            }
            ledger.rows.push(RegretRow {
                episode: parse(fields[0])?,
                agent_regret: fields[1..=agents].iter().map(|f| parse(f)).collect::<Result<_>>()?,
                group: parse(fields[agents + 1])?,
                cumulative: parse(fields[agents + 2])?,
            });
        }
        Ok(ledger)
    }
}

/// Tabulated per-agent MDPs and their optimal start values.
#[derive(Clone, Debug)]
pub struct ParallelOracle {
    pub tabular: Vec<TabularMdp>,
    /// `v_star[m][x]` at the first step.
    pub v_star: Vec<Vec<f64>>,
}

impl ParallelOracle {
    pub fn new(set: &ParallelEnvSet) -> Result<Self> {
        let tabular: Vec<TabularMdp> = set.specs.iter().map(|s| s.tabulate()).collect::<Result<_>>()?;
        let v_star = tabular.iter().map(|t| t.solve().v_star.swap_remove(0)).collect();
        Ok(Self { tabular, v_star })
    }
}

/// Appends the exact group regret of one episode's executed policies.
pub fn record_parallel_regret(
    ledger: &mut RegretLedger,
    oracle: &ParallelOracle,
    episode: usize,
    policies: &[Policy],
    start_states: &[usize],
) -> Result<()> {
    if policies.len() != oracle.tabular.len() || start_states.len() != policies.len() {
        return Err(invalid("need one policy and start state per agent"));
    }
    let regrets = policies
        .iter()
        .zip(start_states)
        .enumerate()
        .map(|(m, (pi, x))| {
            let v = oracle.tabular[m].evaluate(pi)?;
            let star = oracle.v_star[m].get(*x).ok_or_else(|| invalid(format!("start state {x} out of range")))?;
            Ok(star - v[0][*x])
        })
        .collect::<Result<Vec<f64>>>()?;
    ledger.push(episode, regrets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdpRegretRow {
    pub episode: usize,
    pub upsilon: Vec<f64>,
    pub fixed_start: f64,
    pub max_over_states: f64,
    /// Running sum of `max_over_states`, `ℜ_C(t)`.
    pub cumulative: f64,
    pub cumulative_fixed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MmdpRegretLedger {
    pub agents: usize,
    pub rows: Vec<MmdpRegretRow>,
}

impl MmdpRegretLedger {
    pub fn new(agents: usize) -> Self {
        Self { agents, rows: Vec::new() }
    }

    pub fn cumulative(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative)
    }

    pub fn cumulative_fixed(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_fixed)
    }

    pub fn push(&mut self, episode: usize, upsilon: Vec<f64>, fixed_start: f64, max_over_states: f64) -> Result<()> {
        if !(fixed_start >= REGRET_FLOOR) || !(max_over_states >= fixed_start - 1e-12) {
            return Err(protocol(format!(
                "bad regret pair ({fixed_start}, {max_over_states}) at episode {episode}"
            )));
        }
        let cumulative = self.cumulative() + max_over_states;
        let cumulative_fixed = self.cumulative_fixed() + fixed_start;
        self.rows.push(MmdpRegretRow { episode, upsilon, fixed_start, max_over_states, cumulative, cumulative_fixed });
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["episode".to_string()];
        header.extend((0..self.agents).map(|m| format!("upsilon_{m}")));
        header.extend(["fixed_start", "max_over_states", "cumulative", "cumulative_fixed"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.episode.to_string()];
            rec.extend(row.upsilon.iter().map(|v| format_float(*v)));
            rec.extend(
                [row.fixed_start, row.max_over_states, row.cumulative, row.cumulative_fixed].map(format_float),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let agents = r.headers()?.iter().filter(|h| h.starts_with("upsilon_")).count();
        let mut ledger = Self::new(agents);
        for rec in r.records() {
            let rec = rec?;
            let fields: Vec<&str> = rec.iter().collect();
            if fields.len() != agents + 5 {
                return Err(invalid("MMDP regret row has the wrong width"));
            }
            let tail: Vec<f64> = fields[agents + 1..].iter().map(|f| parse(f)).collect::<Result<_>>()?;
            ledger.rows.push(MmdpRegretRow {
                episode: parse(fields[0])?,
                upsilon: fields[1..=agents].iter().map(|f| parse(f)).collect::<Result<_>>()?,
                fixed_start: tail[0],
                max_over_states: tail[1],
                cumulative: tail[2],
                cumulative_fixed: tail[3],
            });
        }
        Ok(ledger)
    }
}

/// Scalarized oracles, cached by `υ` rounded to 12 decimals.
#[derive(Clone, Debug)]
pub struct MmdpOracle {
    pub model: JointModel,
    cache: HashMap<Vec<i64>, (TabularMdp, Vec<f64>)>,
    pub hits: usize,
    pub misses: usize,
}

impl MmdpOracle {
    pub fn new(spec: &MmdpSpec) -> Result<Self> {
        Ok(Self { model: spec.joint_model()?, cache: HashMap::new(), hits: 0, misses: 0 })
    }

    fn key(upsilon: &[f64]) -> Vec<i64> {
        upsilon.iter().map(|u| (u * 1e12).round() as i64).collect()
    }

    /// The scalarized MDP and its optimal first-step values.
    pub fn scalarized(&mut self, upsilon: &[f64]) -> Result<&(TabularMdp, Vec<f64>)> {
        let key = Self::key(upsilon);
        if self.cache.contains_key(&key) {
            self.hits += 1;
        } else {
            self.misses += 1;
            let mdp = self.model.scalarized(upsilon)?;
            let v = mdp.solve().v_star.swap_remove(0);
            self.cache.insert(key.clone(), (mdp, v));
        }
        Ok(&self.cache[&key])
    }

    /// `(fixed-start gap, max-over-states gap)` of `policy` under `υ`.
    pub fn gaps(&mut self, upsilon: &[f64], policy: &Policy, start_state: usize) -> Result<(f64, f64)> {
        let (mdp, v_star) = self.scalarized(upsilon)?;
        if start_state >= v_star.len() {
            return Err(invalid(format!("start state {start_state} out of range")));
        }
        let v = mdp.evaluate(policy)?;
        let gaps: Vec<f64> = v_star.iter().zip(&v[0]).map(|(s, p)| s - p).collect();
        Ok((gaps[start_state], gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
    }
}

pub fn record_mmdp_regret(
    ledger: &mut MmdpRegretLedger,
    oracle: &mut MmdpOracle,
    episode: usize,
    upsilon: &[f64],
    policy: &Policy,
    start_state: usize,
) -> Result<()> {
    let (fixed, max) = oracle.gaps(upsilon, policy, start_state)?;
    ledger.push(episode, upsilon.to_vec(), fixed, max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    /// Distinct policies after deduplication.
    pub policies: usize,
}

/// Monte-Carlo estimate of `E_υ max_x [V*_υ(x) − max_π V^π_υ(x)]` over a
/// stored policy set. Draws come from a stream separate from training.
pub fn estimate_bayes_regret(
    oracle: &mut MmdpOracle,
    policies: &[Policy],
    sampler: &SamplerSpec,
    n_samples: usize,
    seed: u64,
) -> Result<BayesEstimate> {
    let mut seen = std::collections::HashSet::new();
    let distinct: Vec<&Policy> = policies.iter().filter(|p| seen.insert(p.digest())).collect();
    if distinct.is_empty() {
        return Err(invalid("Bayes regret needs at least one stored policy"));
    }
    if n_samples == 0 {
        return Err(invalid("Bayes regret needs at least one sample"));
    }
    let sampler = ScalarizationSampler::new(sampler.clone(), oracle.model.agents(), rng::derive(seed, &[domain::BAYES]))?;
    let mut draws = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let upsilon = sampler.sample(i);
        let (mdp, v_star) = oracle.scalarized(&upsilon)?.clone();
        let mut best = vec![f64::NEG_INFINITY; v_star.len()];
        for pi in &distinct {
            let v = mdp.evaluate(pi)?;
            for (b, val) in best.iter_mut().zip(&v[0]) {
                *b = b.max(*val);
            }
        }
        draws.push(v_star.iter().zip(&best).map(|(s, b)| s - b).fold(f64::NEG_INFINITY, f64::max));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = if draws.len() > 1 { draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(BayesEstimate { mean, std_error: (var / n).sqrt(), samples: draws.len(), policies: distinct.len() })
}

/// Shortest decimal that round-trips.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse<T: std::str::FromStr>(field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| invalid(format!("cannot parse `{field}`")))
}
