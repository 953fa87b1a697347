//! Attack quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::victim::{PolicyEstimate, TargetSpec};

/// True when the target action strictly beats every other action in `s`.
pub fn target_adopted(policy: &PolicyEstimate, s: usize, target_action: usize) -> bool {
    let row = policy.row(s);
    let p = row[target_action];
    row.iter().enumerate().all(|(a, &q)| a == target_action || p > q)
}

fn check(target: &TargetSpec) -> Result<f64> {
    if target.is_empty() {
        Err(Error::EmptyTarget)
    } else {
        Ok(target.len() as f64)
    }
}

/// @Acc: fraction of target states whose target action is the strict argmax.
pub fn acc(policy: &PolicyEstimate, target: &TargetSpec) -> Result<f64> {
    let n = check(target)?;
    let hits = target.pairs().filter(|&(s, a)| target_adopted(policy, s, a.index())).count();
    Ok(hits as f64 / n)
}

/// @SoftAcc: mean probability of the target action over target states.
pub fn soft_acc(policy: &PolicyEstimate, target: &TargetSpec) -> Result<f64> {
    let n = check(target)?;
    Ok(target.pairs().map(|(s, a)| policy.row(s)[a.index()]).sum::<f64>() / n)
}

/// Like @SoftAcc, but only states where the target action is adopted contribute.
pub fn partial_soft_acc(policy: &PolicyEstimate, target: &TargetSpec) -> Result<f64> {
    let n = check(target)?;
    Ok(target
        .pairs()
        .filter(|&(s, a)| target_adopted(policy, s, a.index()))
        .map(|(s, a)| policy.row(s)[a.index()])
        .sum::<f64>()
        / n)
}

/// @Effort: mean absolute altitude change between consecutive worlds.
pub fn effort(previous: &[f64], current: &[f64]) -> Result<f64> {
    if previous.len() != current.len() {
        return Err(Error::DimensionMismatch { expected: previous.len(), got: current.len() });
    }
    if previous.is_empty() {
        return Ok(0.0);
    }
    Ok(previous.iter().zip(current).map(|(a, b)| (a - b).abs()).sum::<f64>() / previous.len() as f64)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub attack_step: usize,
    pub acc: f64,
    pub soft_acc: f64,
    pub partial_soft_acc: f64,
    /// `None` at step 0 (no attack yet).
    pub effort: Option<f64>,
    pub wall_time_s: f64,
    pub raw_divergence: f64,
    pub gamma: f64,
    pub reward: f64,
}

impl MetricRow {
    pub const HEADER: &'static str =
        "run_id,seed,episode,attack_step,acc,soft_acc,partial_soft_acc,effort,wall_time_s,raw_divergence,gamma,reward";

    pub fn to_csv_line(&self) -> String {
        let effort = self.effort.map(|e| e.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.episode,
            self.attack_step,
            self.acc,
            self.soft_acc,
            self.partial_soft_acc,
            effort,
            self.wall_time_s,
            self.raw_divergence,
            self.gamma,
            self.reward
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<MetricRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::DimensionMismatch { expected: 12, got: f.len() });
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Config(format!("{s:?}: {e}")));
        Ok(MetricRow {
            run_id: f[0].to_string(),
            seed: f[1].parse().map_err(|e| Error::Config(format!("{e}")))?,
            episode: int(f[2])?,
            attack_step: int(f[3])?,
            acc: num(f[4])?,
            soft_acc: num(f[5])?,
            partial_soft_acc: num(f[6])?,
            effort: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            wall_time_s: num(f[8])?,
            raw_divergence: num(f[9])?,
            gamma: num(f[10])?,
            reward: num(f[11])?,
        })
    }
}
