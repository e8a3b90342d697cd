//! Normalized estimation errors, their task and time averages, and the
//! experiment suites built on them.

mod experiments;
mod report;

pub use experiments::{
    error_profile_grid, evaluate_lambda, held_out_adaptation, evaluate_sampling, evaluate_task, evaluate_x0, run_experiment_lambda,
    run_experiment_sampling, run_experiment_x0, train_estimators, training_pool, validation_tasks, AdaptOutcome,
    EvalOptions, Estimator, ErrorGrid, TaskEval, X0Report,
};
pub use report::{AdaptCheck, ExperimentReport, ResultRow, TaggedSeries};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Smallest denominator used for `||truth||`.
pub const ERROR_FLOOR: f64 = 1e-8;

/// `||truth - estimate|| / ||truth||`; the flag reports a floored denominator.
pub fn normalized_error(truth: &[f64], estimate: &[f64]) -> Result<(f64, bool)> {
    if truth.len() != estimate.len() {
        return Err(Error::shape(
            "normalized_error",
            format!("truth has {} entries, estimate {}", truth.len(), estimate.len()),
        ));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
    let den = norm(&mut truth.iter().copied());
    let num = norm(&mut truth.iter().zip(estimate).map(|(a, b)| a - b));
    Ok((num / den.max(ERROR_FLOOR), den < ERROR_FLOOR))
}

/// Normalized state and latent errors of one task over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub task_id: usize,
    pub times: Vec<f64>,
    pub e_x: Vec<f64>,
    pub e_z: Vec<f64>,
    /// Samples whose state norm fell below [`ERROR_FLOOR`].
    pub floored: Vec<bool>,
}

impl ErrorSeries {
    pub fn new(
        task_id: usize,
        times: Vec<f64>,
        x: &Array2<f64>,
        x_hat: &Array2<f64>,
        z: &Array2<f64>,
        z_hat: &Array2<f64>,
    ) -> Result<Self> {
        let n = times.len();
        if [x.nrows(), x_hat.nrows(), z.nrows(), z_hat.nrows()].iter().any(|r| *r != n) {
            return Err(Error::shape("ErrorSeries", "series lengths differ"));
        }
        let mut e_x = Vec::with_capacity(n);
        let mut e_z = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        for k in 0..n {
            let (ex, fx) = normalized_error(&x.row(k).to_vec(), &x_hat.row(k).to_vec())?;
            let (ez, _) = normalized_error(&z.row(k).to_vec(), &z_hat.row(k).to_vec())?;
            e_x.push(ex);
            e_z.push(ez);
            floored.push(fx);
        }
        Ok(Self { task_id, times, e_x, e_z, floored })
    }

    /// Index of the first sample at or after `t`.
    pub fn index_from(&self, t: f64) -> usize {
        self.times.partition_point(|s| *s < t - 1e-9)
    }
}

fn check_grids(series: &[ErrorSeries]) -> Result<&ErrorSeries> {
    let first = series
        .first()
        .ok_or_else(|| Error::InsufficientData("no error series to average".into()))?;
    if series.iter().any(|s| s.times != first.times || s.e_x.len() != first.times.len()) {
        return Err(Error::shape("task_mean_error", "series do not share a time grid"));
    }
    Ok(first)
}

/// Mean of the state errors across tasks at time `t`.
pub fn task_mean_error(series: &[ErrorSeries], t: f64) -> Result<f64> {
    let first = check_grids(series)?;
    let k = first
        .times
        .iter()
        .position(|s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
        .ok_or_else(|| Error::InvalidState(format!("t = {t} is not on the time grid")))?;
    Ok(series.iter().map(|s| s.e_x[k]).sum::<f64>() / series.len() as f64)
}

/// [`task_mean_error`] at every sample of the shared grid.
pub fn task_mean_curve(series: &[ErrorSeries]) -> Result<Vec<f64>> {
    let first = check_grids(series)?;
    let mut acc = vec![0.0; first.times.len()];
    for s in series {
        for (a, e) in acc.iter_mut().zip(&s.e_x) {
            *a += e;
        }
    }
    Ok(acc.into_iter().map(|a| a / series.len() as f64).collect())
}

/// Time average of samples `e_0..e_N`. The literal form divides the sum of
/// the `N + 1` samples by `N`; otherwise the plain mean is used. A single
/// sample is returned as is.
pub fn time_mean_error(values: &[f64], literal: bool) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("time average of an empty series".into()));
    }
    let sum: f64 = values.iter().sum();
    let n = values.len();
    Ok(match (literal, n) {
        (_, 1) => sum,
        (true, _) => sum / (n - 1) as f64,
        (false, _) => sum / n as f64,
    })
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
