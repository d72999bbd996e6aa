//! Trajectory and map quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::circular_level_distance;
use crate::pose::DiscretePose;
use crate::tensor::Grid3;

/// Additive smoothing used when turning map cells into distributions.
pub const DEFAULT_SMOOTHING: f64 = 1e-4;

/// `(v + eps) / sum(v + eps)` for one cell's class vector.
pub fn smoothed_distribution(values: &[f64], eps: f64, out: &mut [f64]) {
    let z: f64 = values.iter().map(|v| v + eps).sum();
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v + eps) / z;
    }
}

fn check_pair(op: &'static str, truth: &Grid3, est: &Grid3) -> Result<()> {
    if !truth.same_shape(est) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", truth.shape(), est.shape())));
    }
    Ok(())
}

/// Mean squared difference between the per-cell class distributions of
/// `truth` and `est`, both smoothed by `eps`. Averaged over all `L*H*W`
/// entries. Empty cells in either map become uniform.
pub fn map_mse(truth: &Grid3, est: &Grid3, eps: f64) -> Result<f64> {
    check_pair("map_mse", truth, est)?;
    let (lc, hh, ww) = truth.shape();
    let mut tv = vec![0.0; lc];
    let mut ev = vec![0.0; lc];
    let mut a = vec![0.0; lc];
    let mut b = vec![0.0; lc];
    let mut acc = 0.0;
    for x in 0..hh {
        for y in 0..ww {
            for l in 0..lc {
                tv[l] = truth.get(l, x, y);
                ev[l] = est.get(l, x, y);
            }
            smoothed_distribution(&tv, eps, &mut a);
            smoothed_distribution(&ev, eps, &mut b);
            acc += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    Ok(acc / (lc * hh * ww) as f64)
}

pub fn position_error(truth: DiscretePose, est: DiscretePose) -> f64 {
    let dx = truth.x as f64 - est.x as f64;
    let dy = truth.y as f64 - est.y as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Circular heading difference in degrees, in `[0, 180]`.
pub fn direction_error_deg(truth: DiscretePose, est: DiscretePose, orientations: usize) -> f64 {
    circular_level_distance(truth.r, est.r, orientations) as f64 * 360.0 / orientations as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub truth: DiscretePose,
    pub estimate: DiscretePose,
    pub pos_err: f64,
    pub dir_err_deg: f64,
    pub source: String,
    pub map_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub ape: f64,
    pub ade: f64,
    pub final_map_mse: f64,
    pub inertial_fraction: f64,
}

pub fn summarize(steps: &[StepMetrics], final_map_mse: f64) -> EpisodeSummary {
    let n = steps.len().max(1) as f64;
    EpisodeSummary {
        steps: steps.len(),
        ape: steps.iter().map(|s| s.pos_err).sum::<f64>() / n,
        ade: steps.iter().map(|s| s.dir_err_deg).sum::<f64>() / n,
        final_map_mse,
        inertial_fraction: steps.iter().filter(|s| s.source == "inertial").count() as f64 / n,
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
