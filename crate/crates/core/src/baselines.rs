//! Reference estimators: a driftless Kalman filter, trailing moving averages
//! and the 7-day windowed average used to score now-casts.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dist::CountPmf;
use crate::error::{Error, Result};
use crate::ingest::add_days;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams {
    pub mu: f64,
    /// Transition variance.
    pub sigma2: f64,
    /// Observation variance.
    pub sigma_y2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanStep {
    pub mean: f64,
    pub variance: f64,
    pub gain: f64,
}

pub fn kalman_gain(sigma2: f64, v_prev: f64, sigma_y2: f64) -> f64 {
    (sigma2 + v_prev) / (sigma2 + v_prev + sigma_y2)
}

/// Random-walk Kalman filter started from mean `mu` with zero variance.
pub fn kalman_filter(y: &[f64], params: &KalmanParams) -> Result<Vec<KalmanStep>> {
    if y.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    if !(params.sigma2 > 0.0 && params.sigma_y2 > 0.0) {
        return Err(Error::InvalidInput("Kalman variances must be positive".into()));
    }
    let mut mean = params.mu;
    let mut v = 0.0;
    Ok(y.iter()
        .map(|obs| {
            let k = kalman_gain(params.sigma2, v, params.sigma_y2);
            mean = k * obs + (1.0 - k) * mean;
            v = (1.0 - k) * (params.sigma2 + v);
            KalmanStep {
                mean,
                variance: v,
                gain: k,
            }
        })
        .collect())
}

/// Weights `w_i = K_i prod_{j=i+1..t} (1 - K_j)` on `y_0..y_t` and the
/// weight left on the prior mean, so that the filtering mean at `t` is
/// `sum_i w_i y_i + rest * mu`.
pub fn kalman_weights(steps: &[KalmanStep], t: usize) -> (Vec<f64>, f64) {
    let mut weights = vec![0.0; t + 1];
    let mut tail = 1.0;
    for i in (0..=t).rev() {
        weights[i] = steps[i].gain * tail;
        tail *= 1.0 - steps[i].gain;
    }
    (weights, tail)
}

/// Filtering means rebuilt from the weighted-sum form.
pub fn kalman_expanded_means(y: &[f64], steps: &[KalmanStep], mu: f64) -> Vec<f64> {
    (0..steps.len())
        .map(|t| {
            let (w, rest) = kalman_weights(steps, t);
            w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() + rest * mu
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaWeights {
    Uniform,
    /// Weights `1..=window`, the most recent day heaviest.
    Linear,
}

/// Trailing weighted mean. Leading days average over the available prefix.
pub fn moving_average(y: &[f64], window: usize, weights: MaWeights) -> Vec<f64> {
    let window = window.max(1);
    (0..y.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let slice = &y[lo..=t];
            let w = |k: usize| match weights {
                MaWeights::Uniform => 1.0,
                MaWeights::Linear => (k + 1) as f64,
            };
            let num: f64 = slice.iter().enumerate().map(|(k, v)| w(k) * v).sum();
            let den: f64 = (0..slice.len()).map(w).sum();
            num / den
        })
        .collect()
}

/// Index range of the 7-day windowed average ending on `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaWindow {
    /// Days `T-7..=T` (eight terms) divided by 7.
    Literal,
    /// Days `T-6..=T` divided by 7.
    SevenDay,
}

impl WaWindow {
    pub fn dates(&self, end: NaiveDate) -> Vec<NaiveDate> {
        let first = match self {
            WaWindow::Literal => -7,
            WaWindow::SevenDay => -6,
        };
        (first..=0).map(|k| add_days(end, k)).collect()
    }
}

pub fn windowed_average(values: &BTreeMap<NaiveDate, f64>, end: NaiveDate, window: WaWindow) -> Result<f64> {
    let mut sum = 0.0;
    for d in window.dates(end) {
        sum += values.get(&d).ok_or(Error::MissingPosterior(d))?;
    }
    Ok(sum / 7.0)
}

/// Windowed average of posterior means.
pub fn windowed_average_nowcast(
    posteriors: &BTreeMap<NaiveDate, CountPmf>,
    end: NaiveDate,
    window: WaWindow,
) -> Result<f64> {
    let means = window
        .dates(end)
        .into_iter()
        .filter_map(|d| posteriors.get(&d).map(|p| (d, p.mean())))
        .collect();
    windowed_average(&means, end, window)
}

/// `|wa - WA(converged)|` over the same index range.
pub fn windowed_average_error(
    wa: f64,
    converged: &BTreeMap<NaiveDate, u64>,
    end: NaiveDate,
    window: WaWindow,
) -> Result<f64> {
    let mut sum = 0.0;
    for d in window.dates(end) {
        sum += *converged.get(&d).ok_or(Error::MissingReport { date: d, lag: 7 })? as f64;
    }
    Ok((wa - sum / 7.0).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub area_id: String,
    pub date: NaiveDate,
    pub estimator: String,
    pub value: f64,
}

pub const BASELINE_HEADER: [&str; 4] = ["area_id", "date", "estimator", "value"];

pub fn write_baseline_csv<W: Write>(rows: &[BaselineRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(BASELINE_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.area_id.as_str(),
            &r.date.to_string(),
            r.estimator.as_str(),
            &format!("{}", r.value),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
