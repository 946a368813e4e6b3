//! Summary statistics computed from run outputs.

use serde::Serialize;

use crate::error::{LabError, LabResult};

/// Absolute slack when comparing an evaluation return with the threshold.
/// DeepSea's optimal return `1 - N * (0.01 / N)` is not always exactly `0.99` in floating point.
pub const RETURN_TOLERANCE: f64 = 1e-9;

/// One evaluation point of the mean-greedy policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub episode: usize,
    pub interactions: usize,
    pub mean_return: f64,
}

/// First checkpoint whose averaged return reaches `threshold`; `None` is the failure marker.
pub fn episodes_to_learn(checkpoints: &[Checkpoint], threshold: f64) -> LabResult<Option<Checkpoint>> {
    if checkpoints.is_empty() {
        return Err(LabError::Config("no evaluation checkpoints to score".into()));
    }
    Ok(checkpoints.iter().find(|c| c.mean_return >= threshold - RETURN_TOLERANCE).copied())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Least-squares line through `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r_squared })
}

/// Means of the first and the last quarter of a per-episode series.
pub fn quartile_means(series: &[f64]) -> Option<(f64, f64)> {
    let q = series.len() / 4;
    if q == 0 {
        return None;
    }
    Some((mean(&series[..q]), mean(&series[series.len() - q..])))
}

pub fn cumulative(series: &[f64]) -> Vec<f64> {
    series
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}
