//! Forecast displacement metrics and small-sample statistics.
//!
//! Displacement metrics compare forecast trajectories against ground truth
//! by final position. The statistics helpers aggregate per-scene or
//! per-episode values into means with normal-approximation confidence
//! intervals, using pairwise summation so results do not depend on thread
//! count (values are always collected in index order before aggregation).

use crate::error::{Error, Result};
use crate::geom::Trajectory;

/// Final displacement error: distance between the last points.
pub fn fde(forecast: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if forecast.len() != gt.len() {
        return Err(Error::Usage(format!(
            "forecast has {} points, ground truth {}",
            forecast.len(),
            gt.len()
        )));
    }
    Ok((forecast.final_position() - gt.final_position()).norm())
}

/// Minimum final displacement error over a set of forecast samples.
pub fn min_fde(forecasts: &[Trajectory], gt: &Trajectory) -> Result<f64> {
    if forecasts.is_empty() {
        return Err(Error::Usage("min_fde needs at least one forecast".into()));
    }
    let mut best = f64::INFINITY;
    for f in forecasts {
        best = best.min(fde(f, gt)?);
    }
    Ok(best)
}

/// Sums `values` over a fixed binary tree, so the result depends only on the
/// input order, never on chunking across threads.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean with standard error and a 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStats {
    pub mean: f64,
    /// Standard error of the mean; zero for a single value.
    pub se: f64,
    /// 95% confidence half-width, `1.96 * se`.
    pub ci95: f64,
    pub n: usize,
}

pub fn mean_stats(values: &[f64]) -> Result<MeanStats> {
    if values.is_empty() {
        return Err(Error::Usage("cannot aggregate zero values".into()));
    }
    let n = values.len();
    let mean = pairwise_sum(values) / n as f64;
    let se = if n == 1 {
        0.0
    } else {
        let devs: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&devs) / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(MeanStats { mean, se, ci95: 1.96 * se, n })
}

/// Linear-interpolation quantile (the order statistic at rank `(n-1) * q`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("cannot take a quantile of zero values".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile level must lie in [0, 1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}
