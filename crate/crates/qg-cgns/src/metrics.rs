//! Error and correlation metrics for comparing a posterior mean against the
//! true field, plus complexity-normalized timing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RMSE normalized by the standard deviation of the truth:
/// `sqrt(mean((mu - x)^2)) / std(x)` with the population divisor.
pub fn rmse(mu: &[f64], x: &[f64]) -> Result<f64> {
    if mu.len() != x.len() || x.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "rmse",
            reason: format!("need equal lengths >= 2, got {} and {}", mu.len(), x.len()),
        });
    }
    let sd = population_std(x);
    if sd == 0.0 {
        return Err(Error::InvalidParameter {
            name: "rmse",
            reason: "truth has zero standard deviation; normalization undefined".into(),
        });
    }
    let mse = mu
        .iter()
        .zip(x)
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        / x.len() as f64;
    Ok(mse.sqrt() / sd)
}

/// Pattern correlation: centered cosine similarity, in `[-1, 1]`.
pub fn corr(mu: &[f64], x: &[f64]) -> Result<f64> {
    if mu.len() != x.len() || x.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "corr",
            reason: format!("need equal lengths >= 2, got {} and {}", mu.len(), x.len()),
        });
    }
    let mean_mu = mu.iter().sum::<f64>() / mu.len() as f64;
    let mean_x = x.iter().sum::<f64>() / x.len() as f64;
    let mut num = 0.0;
    let mut den_mu = 0.0;
    let mut den_x = 0.0;
    for (m, t) in mu.iter().zip(x) {
        let dm = m - mean_mu;
        let dx = t - mean_x;
        num += dm * dx;
        den_mu += dm * dm;
        den_x += dx * dx;
    }
    if den_mu == 0.0 || den_x == 0.0 {
        return Err(Error::InvalidParameter {
            name: "corr",
            reason: "constant input; correlation undefined".into(),
        });
    }
    Ok(num / (den_mu.sqrt() * den_x.sqrt()))
}

pub fn population_std(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Per-step metric sample along a filter run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rmse: f64,
    pub corr: f64,
}

/// Wall-clock record for one completed run; `normalized_time` is
/// `wall_seconds / (n_steps * n^2)`, the per-cell-per-step cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub n: usize,
    pub n_steps: usize,
    pub wall_seconds: f64,
    pub normalized_time: Option<f64>,
}

impl TimingRecord {
    pub fn new(n: usize, n_steps: usize, wall_seconds: f64) -> Self {
        let normalized_time = if n_steps == 0 {
            None
        } else {
            Some(wall_seconds / (n_steps as f64 * (n * n) as f64))
        };
        Self {
            n,
            n_steps,
            wall_seconds,
            normalized_time,
        }
    }
}
