use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::exec::Execution;
use crate::models::DynamicsModel;
use crate::numerics::{Gaussian, RngStream};
use crate::policy::RbfPolicy;
use crate::rollout::{rollout_value, Propagation, RolloutSetup, Terminate};
use crate::{Error, Result};

/// `trajectories[q][t]`: state of particle `q` at time `t`.
pub type Trajectories = Vec<Vec<Vec<f64>>>;

/// Sampled model trajectories of `policy` from `init`.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectories(
    model: &dyn DynamicsModel,
    policy: &RbfPolicy,
    spec: &EnvSpec,
    init: &Gaussian,
    particles: usize,
    steps: usize,
    seed: u64,
    exec: Execution,
) -> Result<Trajectories> {
    let term = |o: &[f64]| spec.terminated_obs(o);
    let terminate: Option<Terminate> = if spec.has_termination() { Some(&term) } else { None };
    let setup = RolloutSetup { model, init, horizon: steps, particles, reward: &spec.reward, terminate, exec };
    let r = rollout_value(&setup, policy, Propagation::Ts, &RngStream::new(seed), true)?;
    r.trajectories.ok_or_else(|| Error::numerical("trajectories were not recorded"))
}

/// Columns `trajectory_id,t,s0,…`.
pub fn trajectories_csv(tr: &Trajectories) -> String {
    let d = tr.first().and_then(|t| t.first()).map_or(0, Vec::len);
    let mut out = String::from("trajectory_id,t");
    for i in 0..d {
        let _ = write!(out, ",s{i}");
    }
    out.push('\n');
    for (q, traj) in tr.iter().enumerate() {
        for (t, s) in traj.iter().enumerate() {
            let _ = write!(out, "{q},{t}");
            for v in s {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Jarque–Bera statistic and its asymptotic p-value (χ² with two degrees of
/// freedom, whose survival function is `exp(-x/2)`).
pub fn jarque_bera(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return (0.0, 1.0);
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    (jb, (-jb / 2.0).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityRow {
    pub t: usize,
    pub component: usize,
    pub jb: f64,
    pub p_value: f64,
}

/// Normality test of every state component at every recorded step `t ≥ 1`.
pub fn normality_table(tr: &Trajectories) -> Vec<NormalityRow> {
    let steps = tr.iter().map(Vec::len).min().unwrap_or(0);
    let d = tr.first().and_then(|t| t.first()).map_or(0, Vec::len);
    let mut rows = Vec::new();
    for t in 1..steps {
        for c in 0..d {
            let xs: Vec<f64> = tr.iter().map(|traj| traj[t][c]).collect();
            let (jb, p_value) = jarque_bera(&xs);
            rows.push(NormalityRow { t, component: c, jb, p_value });
        }
    }
    rows
}

pub fn normality_csv(rows: &[NormalityRow]) -> String {
    let mut out = String::from("t,component,jb,p_value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.t, r.component, r.jb, r.p_value);
    }
    out
}

/// Equal-width histogram of `x` as `lo,hi,count` rows.
pub fn histogram_csv(x: &[f64], bins: usize) -> String {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for v in x {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let mut out = String::from("lo,hi,count\n");
    for (b, c) in counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{c}", lo + b as f64 * width, lo + (b + 1) as f64 * width);
    }
    out
}

/// Writes `trajectories.csv`, `normality.csv` and a one-step histogram of
/// component 0 into `dir`; returns the normality table.
pub fn dump_trajectories(tr: &Trajectories, dir: &Path) -> Result<Vec<NormalityRow>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectories.csv"), trajectories_csv(tr))?;
    let rows = normality_table(tr);
    fs::write(dir.join("normality.csv"), normality_csv(&rows))?;
    if tr.iter().all(|t| t.len() > 1) && !tr.is_empty() {
        let x: Vec<f64> = tr.iter().map(|t| t[1][0]).collect();
        fs::write(dir.join("histogram_t1_s0.csv"), histogram_csv(&x, 50))?;
    }
    Ok(rows)
}
