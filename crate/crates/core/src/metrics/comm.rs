use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::regret::{format_float, parse};
use crate::coop_mmdp::MmdpTrace;
use crate::coop_parallel::{ParallelTrace, SyncPolicy};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub episode: usize,
    pub synced: bool,
    /// Per-step log-det growth at episode end, max over agents.
    pub log_det_ratios: Vec<f64>,
    pub uploads: usize,
    pub downloads: usize,
    pub payload_scalars: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub horizon: usize,
    pub rows: Vec<CommRow>,
}

impl CommLedger {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, rows: Vec::new() }
    }

    pub fn push(&mut self, row: CommRow) -> Result<()> {
        if row.log_det_ratios.len() != self.horizon {
            return Err(invalid("one log-det ratio per step expected"));
        }
        if !row.synced && (row.uploads + row.downloads + row.payload_scalars) > 0 {
            return Err(invalid(format!("episode {} moved data without a sync", row.episode)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn from_parallel(trace: &ParallelTrace, horizon: usize) -> Result<Self> {
        let mut ledger = Self::new(horizon);
        for e in &trace.episodes {
            let ratios =
                (0..horizon).map(|h| e.log_det_ratios.iter().map(|r| r[h]).fold(0.0, f64::max)).collect();
            let (uploads, downloads, payload) =
                e.sync.as_ref().map_or((0, 0, 0), |s| (s.uploads(), s.downloads(), s.payload_scalars()));
            ledger.push(CommRow {
                episode: e.episode,
                synced: e.sync.is_some(),
                log_det_ratios: ratios,
                uploads,
                downloads,
                payload_scalars: payload,
            })?;
        }
        Ok(ledger)
    }

    pub fn from_mmdp(trace: &MmdpTrace, horizon: usize) -> Result<Self> {
        let mut ledger = Self::new(horizon);
        for e in &trace.episodes {
            let (uploads, downloads, payload) =
                e.sync.as_ref().map_or((0, 0, 0), |s| (s.uploads, s.downloads, s.payload_scalars()));
            ledger.push(CommRow {
                episode: e.episode,
                synced: e.sync.is_some(),
                log_det_ratios: e.log_det_ratios.clone(),
                uploads,
                downloads,
                payload_scalars: payload,
            })?;
        }
        Ok(ledger)
    }

    pub fn sync_episodes(&self) -> usize {
        self.rows.iter().filter(|r| r.synced).count()
    }

    pub fn total_uploads(&self) -> usize {
        self.rows.iter().map(|r| r.uploads).sum()
    }

    pub fn total_downloads(&self) -> usize {
        self.rows.iter().map(|r| r.downloads).sum()
    }

    pub fn total_payload(&self) -> usize {
        self.rows.iter().map(|r| r.payload_scalars).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["episode", "synced", "uploads", "downloads", "payload_scalars"].map(String::from).to_vec();
        header.extend((0..self.horizon).map(|h| format!("log_det_ratio_{h}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.episode.to_string(),
                row.synced.to_string(),
                row.uploads.to_string(),
                row.downloads.to_string(),
                row.payload_scalars.to_string(),
            ];
            rec.extend(row.log_det_ratios.iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let horizon = r.headers()?.iter().filter(|h| h.starts_with("log_det_ratio_")).count();
        let mut ledger = Self::new(horizon);
        for rec in r.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            if f.len() != horizon + 5 {
                return Err(invalid("communication row has the wrong width"));
            }
            ledger.push(CommRow {
                episode: parse(f[0])?,
                synced: parse(f[1])?,
                uploads: parse(f[2])?,
                downloads: parse(f[3])?,
                payload_scalars: parse(f[4])?,
                log_det_ratios: f[5..].iter().map(|v| parse(v)).collect::<Result<_>>()?,
            })?;
        }
        Ok(ledger)
    }
}

/// Which closed-form communication bound applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum BoundParams {
    /// `n ≤ 2H√(d(T/S)·ln(MT)) + 4H`.
    Parallel { dim: usize, horizon: usize, episodes: usize, agents: usize, sync: SyncPolicy },
    /// `n ≤ dH·log_S(1 + MT/d) + H`; `S ≤ 1` requires `n = T`.
    Mmdp { dim: usize, horizon: usize, episodes: usize, agents: usize, threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundVerdict {
    pub measured: usize,
    pub bound: f64,
    /// `"at_most"` or `"equal"`.
    pub relation: String,
    pub pass: bool,
}

impl BoundParams {
    pub fn bound(&self) -> (f64, &'static str) {
        match *self {
            BoundParams::Parallel { dim, horizon, episodes, agents, sync } => {
                let (d, h, t, m) = (dim as f64, horizon as f64, episodes as f64, agents as f64);
                match sync {
                    SyncPolicy::Always => (t, "at_most"),
                    SyncPolicy::Never => (4.0 * h, "at_most"),
                    SyncPolicy::Threshold(s) => {
                        let log = (m * t).ln().max(0.0);
                        (2.0 * h * (d * (t / s) * log).sqrt() + 4.0 * h, "at_most")
                    }
                }
            }
            BoundParams::Mmdp { dim, horizon, episodes, agents, threshold } => {
                let (d, h, t, m) = (dim as f64, horizon as f64, episodes as f64, agents as f64);
                if threshold <= 1.0 {
                    (t, "equal")
                } else {
                    (d * h * (1.0 + m * t / d).ln() / threshold.ln() + h, "at_most")
                }
            }
        }
    }
}

/// Evaluates the closed-form bound for the run and compares the measured
/// number of communication episodes.
pub fn verify_comm_bounds(ledger: &CommLedger, params: &BoundParams) -> BoundVerdict {
    let measured = ledger.sync_episodes();
    let (bound, relation) = params.bound();
    let pass = match relation {
        "equal" => measured as f64 == bound,
        _ => measured as f64 <= bound,
    };
    BoundVerdict { measured, bound, relation: relation.to_string(), pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize, synced: bool) -> CommRow {
        let n = usize::from(synced);
        CommRow { episode, synced, log_det_ratios: vec![0.5, 0.25], uploads: 2 * n, downloads: 2 * n, payload_scalars: 7 * n }
    }

    #[test]
    fn totals_are_row_sums() {
        let mut ledger = CommLedger::new(2);
        for t in 1..=6 {
            ledger.push(row(t, t % 3 == 0)).unwrap();
        }
        assert_eq!(ledger.sync_episodes(), 2);
        assert_eq!(ledger.total_payload(), 14);
        assert_eq!(ledger.total_uploads(), 4);
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        assert_eq!(CommLedger::read_csv(buf.as_slice()).unwrap(), ledger);
    }

    #[test]
    fn data_without_sync_is_rejected() {
        let mut bad = row(1, false);
        bad.uploads = 1;
        assert!(CommLedger::new(2).push(bad).is_err());
    }

    #[test]
    fn parallel_bound_value() {
        let p = BoundParams::Parallel { dim: 5, horizon: 3, episodes: 200, agents: 4, sync: SyncPolicy::Threshold(10.0) };
        let expect = 2.0 * 3.0 * (5.0 * 20.0 * 800f64.ln()).sqrt() + 12.0;
        assert!((p.bound().0 - expect).abs() < 1e-12);
    }

    #[test]
    fn never_sync_passes_trivially() {
        let mut ledger = CommLedger::new(2);
        ledger.push(row(1, false)).unwrap();
        let v = verify_comm_bounds(
            &ledger,
            &BoundParams::Parallel { dim: 4, horizon: 2, episodes: 1, agents: 2, sync: SyncPolicy::Never },
        );
        assert!(v.pass);
        assert_eq!(v.measured, 0);
    }

    #[test]
    fn mmdp_bounds() {
        let p = BoundParams::Mmdp { dim: 4, horizon: 2, episodes: 100, agents: 2, threshold: 2.0 };
        assert!((p.bound().0 - (8.0 * 51f64.log2() + 2.0)).abs() < 1e-9);
        let mut ledger = CommLedger::new(2);
        for t in 1..=3 {
            ledger.push(row(t, true)).unwrap();
        }
        let every = BoundParams::Mmdp { dim: 4, horizon: 2, episodes: 3, agents: 2, threshold: 1.0 };
        assert!(verify_comm_bounds(&ledger, &every).pass);
        let every = BoundParams::Mmdp { dim: 4, horizon: 2, episodes: 4, agents: 2, threshold: 0.5 };
        assert!(!verify_comm_bounds(&ledger, &every).pass);
    }
}
