use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::RunRecord;
use crate::{Error, Result};

/// Linear-interpolation quantile of sorted data, `p ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    /// Median over repeats of the transitions collected so far.
    pub samples: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub rows: Vec<SummaryRow>,
}

impl QuantileSummary {
    pub fn last(&self) -> Option<&SummaryRow> {
        self.rows.last()
    }
}

/// Per-iteration median and quartiles of the evaluation reward over records.
pub fn aggregate(records: &[RunRecord]) -> Result<QuantileSummary> {
    if records.is_empty() {
        return Err(Error::invalid("aggregate needs at least one record"));
    }
    let n_it = records.iter().map(|r| r.iterations.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(n_it);
    for k in 0..n_it {
        let its: Vec<_> = records.iter().filter_map(|r| r.iterations.get(k)).collect();
        let mut rewards: Vec<f64> = its.iter().map(|i| i.eval_avg_reward).collect();
        let mut samples: Vec<f64> = its.iter().map(|i| i.samples_used as f64).collect();
        rewards.sort_by(f64::total_cmp);
        samples.sort_by(f64::total_cmp);
        rows.push(SummaryRow {
            iteration: its[0].iteration,
            samples: quantile_sorted(&samples, 0.5),
            median: quantile_sorted(&rewards, 0.5),
            q25: quantile_sorted(&rewards, 0.25),
            q75: quantile_sorted(&rewards, 0.75),
            repeats: its.len(),
        });
    }
    Ok(QuantileSummary { rows })
}

pub const CSV_HEADER: &str = "iteration,samples,median,q25,q75";

/// CSV text; floats use the shortest representation that round-trips.
pub fn summary_csv(summary: &QuantileSummary) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &summary.rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.samples, r.median, r.q25, r.q75);
    }
    out
}

pub fn emit_csv(summary: &QuantileSummary, path: &Path) -> Result<()> {
    fs::write(path, summary_csv(summary))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub repeats: usize,
    pub wall_time_s: Vec<f64>,
    pub failures: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, records: &[RunRecord], outputs: Vec<String>) -> Manifest {
        Manifest {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            repeats: records.len(),
            wall_time_s: records.iter().map(|r| r.wall_time_s).collect(),
            failures: records.iter().filter_map(|r| r.failure.clone()).collect(),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
