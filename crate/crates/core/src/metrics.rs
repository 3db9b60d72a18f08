//! Imputation error, trajectory realism statistics and sample diversity.
//!
//! Trajectory statistics are built around turn events: interior points
//! where the heading changes by more than `turn_angle_deg`.
//!
//! * sinuosity: mean arc/chord ratio over the pieces between turns,
//! * step change: mean absolute change of consecutive step lengths,
//! * reflection to wall: mean distance from a turn point to the nearest wall,
//! * average length: mean step length.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean over targets of the squared Euclidean error.
pub fn mse(predictions: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: vec![predictions.len()],
            right: vec![truth.len()],
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (h, y) in predictions.iter().zip(truth) {
        if h.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: vec![h.len()],
                right: vec![y.len()],
            });
        }
        total += h.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub side: f64,
    pub turn_angle_deg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            side: 0.8828,
            turn_angle_deg: 15.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub sinuosity: f64,
    pub step_change: f64,
    pub reflection_to_wall: f64,
    pub avg_length: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of interior points where the heading turns by more than the
/// threshold. Zero-length steps carry no heading and never trigger a turn.
pub fn turn_points(traj: &[[f64; 2]], turn_angle_deg: f64) -> Vec<usize> {
    let cos_thr = turn_angle_deg.to_radians().cos();
    (1..traj.len().saturating_sub(1))
        .filter(|&i| {
            let a = [traj[i][0] - traj[i - 1][0], traj[i][1] - traj[i - 1][1]];
            let b = [traj[i + 1][0] - traj[i][0], traj[i + 1][1] - traj[i][1]];
            let (la, lb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            if la == 0.0 || lb == 0.0 {
                return false;
            }
            (a[0] * b[0] + a[1] * b[1]) / (la * lb) < cos_thr
        })
        .collect()
}

pub fn trajectory_stats(traj: &[[f64; 2]], cfg: &TrajectoryConfig) -> Result<TrajectoryStats> {
    if traj.len() < 3 {
        return Err(Error::Config(format!(
            "trajectory statistics need at least 3 points, got {}",
            traj.len()
        )));
    }
    let steps: Vec<f64> = traj.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    let avg_length = steps.iter().sum::<f64>() / steps.len() as f64;
    let step_change =
        steps.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (steps.len() - 1) as f64;

    let turns = turn_points(traj, cfg.turn_angle_deg);
    let mut cuts = vec![0];
    cuts.extend(&turns);
    cuts.push(traj.len() - 1);
    let mut ratios = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let chord = dist(&traj[a], &traj[b]);
        if b - a < 2 || chord == 0.0 {
            continue;
        }
        let arc: f64 = steps[a..b].iter().sum();
        ratios.push((arc / chord).max(1.0));
    }
    let sinuosity = if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let reflection_to_wall = if turns.is_empty() {
        0.0
    } else {
        turns
            .iter()
            .map(|&i| {
                let [x, y] = traj[i];
                x.min(y).min(cfg.side - x).min(cfg.side - y).max(0.0)
            })
            .sum::<f64>()
            / turns.len() as f64
    };
    Ok(TrajectoryStats {
        sinuosity,
        step_change,
        reflection_to_wall,
        avg_length,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticScores {
    pub min_mse: f64,
    pub avg_mse: f64,
    /// `avg / min`; `+inf` when some sample is exact.
    pub ratio: f64,
}

pub fn stochastic_scores(samples: &[Vec<Vec<f64>>], truth: &[Vec<f64>]) -> Result<StochasticScores> {
    if samples.is_empty() {
        return Err(Error::Config("stochastic scores need at least one sample".into()));
    }
    let errs = samples.iter().map(|s| mse(s, truth)).collect::<Result<Vec<_>>>()?;
    let min_mse = errs.iter().cloned().fold(f64::INFINITY, f64::min);
    let avg_mse = errs.iter().sum::<f64>() / errs.len() as f64;
    let ratio = if errs.len() == 1 || avg_mse == min_mse {
        1.0
    } else if min_mse == 0.0 {
        f64::INFINITY
    } else {
        avg_mse / min_mse
    };
    Ok(StochasticScores { min_mse, avg_mse, ratio })
}

/// Named metrics together with the settings that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub config: BTreeMap<String, serde_json::Value>,
}

impl MetricReport {
    /// Non-finite values are refused; infinite diversity ratios are flagged
    /// by the caller under a separate key instead.
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("corpus");
        for k in self.metrics.keys() {
            let _ = write!(h, ",{k}");
        }
        h
    }

    pub fn csv_row(&self, corpus: &str) -> String {
        let mut r = corpus.to_string();
        for v in self.metrics.values() {
            let _ = write!(r, ",{v:?}");
        }
        r
    }

    /// Mean of every metric over `reports`; metrics missing anywhere are dropped.
    pub fn mean_of(reports: &[MetricReport]) -> Result<MetricReport> {
        let mut out = MetricReport::default();
        let Some(first) = reports.first() else {
            return Ok(out);
        };
        out.config = first.config.clone();
        for k in first.metrics.keys() {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| r.get(k)).collect();
            if let Some(vals) = vals {
                out.insert(k, vals.iter().sum::<f64>() / vals.len() as f64)?;
            }
        }
        Ok(out)
    }
}
