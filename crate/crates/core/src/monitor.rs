//! Drift-scale selection by marginal likelihood, threshold alerts and
//! report-consistency monitoring.

use std::io::Write;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::dist::{sorted_quantile, AtomSummary, CountPmf};
use crate::error::{Error, Result};
use crate::ingest::add_days;
use crate::par;
use crate::smc::{
    evidence_terms, forward_filter, predictive_counts, smooth_count, Model, ParticleState, RunConfig, SmoothingResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub sigma: f64,
    /// `None` when the filter failed for this value.
    pub log_evidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaScan {
    pub points: Vec<SigmaPoint>,
    pub best: f64,
}

/// Runs the filter once per grid value with a shared seed and keeps the
/// value with the largest log evidence. Ties go to the smaller value.
pub fn select_sigma(model: &Model, grid: &[f64], config: &RunConfig) -> Result<SigmaScan> {
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty sigma grid".into()));
    }
    let points = par::map(&grid, |sigma| {
        let cfg = RunConfig {
            sigma: *sigma,
            ..config.clone()
        };
        let ev = forward_filter(model, &cfg).map(|states| evidence_terms(&states, model, &cfg).iter().sum::<f64>());
        let log_evidence = match ev {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                warn!("sigma {sigma}: log evidence {v}; excluded");
                None
            }
            Err(e) => {
                warn!("sigma {sigma}: {e}; excluded");
                None
            }
        };
        SigmaPoint {
            sigma: *sigma,
            log_evidence,
        }
    });
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(v) = p.log_evidence {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((p.sigma, v));
            }
        }
    }
    let (best, _) = best.ok_or_else(|| Error::Degenerate {
        step: 0,
        reason: "filter failed for every sigma in the grid".into(),
    })?;
    Ok(SigmaScan { points, best })
}

pub fn write_sigma_scan_csv<W: Write>(scan: &SigmaScan, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["sigma", "log_evidence"])?;
    for p in &scan.points {
        let v = p.log_evidence.map(|v| format!("{v}")).unwrap_or_default();
        wtr.write_record([format!("{}", p.sigma), v])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `sum_x p_smooth(x) p_pred(x)`.
pub fn consistency_statistic(predictive: &CountPmf, smoothed: &CountPmf) -> f64 {
    smoothed.expect_pmf(predictive)
}

/// Log evidence of the `k + 1` consecutive one-step terms starting at day
/// `start` (which must be at least 1).
pub fn lagged_report_evidence(terms: &[f64], start: usize, k: usize) -> Result<f64> {
    if start == 0 || start + k >= terms.len() {
        return Err(Error::InvalidInput(format!(
            "window {start}..={} outside 1..{}",
            start + k,
            terms.len()
        )));
    }
    Ok(terms[start..=start + k].iter().sum())
}

/// Share of atoms strictly above `threshold`.
pub fn alert_probability(lambda: &[f64], threshold: f64) -> f64 {
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.iter().filter(|l| **l > threshold).count() as f64 / lambda.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub date: NaiveDate,
    pub mean: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    /// Lower 5% quantile above zero.
    pub increasing: bool,
}

pub fn drift_summary(smoothing: &SmoothingResult) -> Vec<DriftSummary> {
    smoothing
        .dates
        .iter()
        .zip(&smoothing.kappa)
        .map(|(date, k)| {
            let s = AtomSummary::of(k);
            DriftSummary {
                date: *date,
                mean: s.mean,
                q05: s.q05,
                median: s.median,
                q95: s.q95,
                increasing: s.q05 > 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertDay {
    pub date: NaiveDate,
    pub p_above_threshold: f64,
    pub kappa_mean: f64,
    pub kappa_q05: f64,
    pub kappa_q95: f64,
    pub increasing_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertReport {
    pub area_id: String,
    pub threshold: f64,
    pub trigger: f64,
    pub days: Vec<AlertDay>,
    /// First day whose exceedance probability is above `trigger`.
    pub first_alert: Option<NaiveDate>,
    /// Whether the latest day is above `trigger`.
    pub triggered: bool,
}

pub fn alert_report(smoothing: &SmoothingResult, threshold: f64, trigger: f64) -> AlertReport {
    let days: Vec<AlertDay> = drift_summary(smoothing)
        .into_iter()
        .zip(&smoothing.lambda)
        .map(|(d, lambda)| AlertDay {
            date: d.date,
            p_above_threshold: alert_probability(lambda, threshold),
            kappa_mean: d.mean,
            kappa_q05: d.q05,
            kappa_q95: d.q95,
            increasing_flag: d.increasing,
        })
        .collect();
    AlertReport {
        area_id: smoothing.area_id.clone(),
        threshold,
        trigger,
        first_alert: days.iter().find(|d| d.p_above_threshold > trigger).map(|d| d.date),
        triggered: days.last().is_some_and(|d| d.p_above_threshold > trigger),
        days,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub test_date: NaiveDate,
    /// Publication date of the report being checked.
    pub report_date: NaiveDate,
    pub lag: u32,
    pub value: f64,
    /// Trailing low quantile of earlier values, once enough history exists.
    pub baseline: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Number of earlier values in the baseline.
    pub window: usize,
    pub quantile: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: 14,
            quantile: 0.05,
        }
    }
}

/// Consistency of each report with the model's one-step prediction.
///
/// `states` are filtering atoms of a fixed-lag view. For day `t + 1` the
/// count posterior is taken from the filtering atoms at `t + 1`, i.e. given
/// reports up to and including that day's, and compared with the predictive
/// built from day `t`.
pub fn consistency_series(
    model: &Model,
    states: &[ParticleState],
    config: &RunConfig,
    monitor: &MonitorConfig,
) -> Result<Vec<ConsistencyPoint>> {
    let days: Vec<usize> = (1..states.len()).filter(|t| model.emissions[*t].is_some()).collect();
    let values: Vec<Result<ConsistencyPoint>> = par::map(&days, |t| {
        let t = *t;
        let em = model.emissions[t].as_ref().expect("filtered above");
        let lag = model.series.obs[t].map(|o| o.lag).unwrap_or(0);
        let pred = predictive_counts(&states[t - 1], model, config)?;
        let smooth = smooth_count(&states[t].lambda, &states[t].z, Some(em), &config.trunc)?;
        Ok(ConsistencyPoint {
            test_date: model.series.dates[t],
            report_date: add_days(model.series.dates[t], lag as i64),
            lag,
            value: consistency_statistic(&pred, &smooth),
            baseline: None,
            flagged: false,
        })
    });
    let mut points = values.into_iter().collect::<Result<Vec<_>>>()?;
    flag_low(&mut points, monitor);
    Ok(points)
}

/// Flags values below the `quantile` of the preceding `window` values.
pub fn flag_low(points: &mut [ConsistencyPoint], monitor: &MonitorConfig) {
    for k in monitor.window..points.len() {
        let mut hist: Vec<f64> = points[k - monitor.window..k].iter().map(|p| p.value).collect();
        hist.sort_by(f64::total_cmp);
        let b = sorted_quantile(&hist, monitor.quantile);
        points[k].baseline = Some(b);
        points[k].flagged = points[k].value < b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::BetaBinomialParams;
    use crate::smc::{backward_smooth, GammaPrior, Observation, Series};
    use approx::assert_relative_eq;

    fn model(counts: &[u64], cfg: &RunConfig) -> Model {
        let s = Series::new(
            "a",
            NaiveDate::from_ymd_opt(2020, 11, 2).unwrap(),
            counts.iter().map(|c| Some(Observation { lag: 7, count: *c })).collect(),
        );
        Model::with_params(s, cfg, |_| BetaBinomialParams::new(1e6, 1.0).unwrap())
    }

    fn cfg() -> RunConfig {
        RunConfig {
            n_particles: 300,
            m_smooth: 300,
            burn_in: 200,
            init_burn_in: 300,
            weekend_prior: None,
            lambda0_prior: Some(GammaPrior { shape: 40.0, rate: 1.0 }),
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn consistency_of_point_masses() {
        let p = CountPmf::point_mass(5);
        assert_eq!(consistency_statistic(&p, &p), 1.0);
        assert_eq!(consistency_statistic(&p, &CountPmf::point_mass(6)), 0.0);
    }

    #[test]
    fn lagged_evidence_windows() {
        let terms = [-1.0, -2.0, -3.0, -4.0];
        assert_eq!(lagged_report_evidence(&terms, 2, 0).unwrap(), -3.0);
        assert_eq!(lagged_report_evidence(&terms, 1, 2).unwrap(), -9.0);
        assert!(lagged_report_evidence(&terms, 0, 1).is_err());
        assert!(lagged_report_evidence(&terms, 2, 2).is_err());
    }

    #[test]
    fn alert_probability_edges() {
        let atoms = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(alert_probability(&atoms, 0.5), 1.0);
        assert_eq!(alert_probability(&atoms, 4.0), 0.0);
        assert_eq!(alert_probability(&atoms, 2.5), 0.5);
    }

    #[test]
    fn sigma_scan_is_order_invariant_and_excludes_nothing_on_clean_data() {
        let counts = [40, 44, 39, 47, 52, 50, 58, 61, 57, 66];
        let c = cfg();
        let m = model(&counts, &c);
        let a = select_sigma(&m, &[5.0, 1.0, 2.0], &c).unwrap();
        let b = select_sigma(&m, &[2.0, 5.0, 1.0, 2.0], &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 3);
        assert!(a.points.iter().all(|p| p.log_evidence.is_some()));
        let mut buf = Vec::new();
        write_sigma_scan_csv(&a, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("sigma,log_evidence\n1,"));
    }

    #[test]
    fn alert_report_tracks_threshold() {
        let counts = [40, 44, 39, 47, 52, 50, 58, 61, 57, 66];
        let c = cfg();
        let m = model(&counts, &c);
        let states = forward_filter(&m, &c).unwrap();
        let sm = backward_smooth(&states, &m.series, &c).unwrap();
        let low = alert_report(&sm, 1.0, 0.9);
        assert!(low.triggered);
        assert_eq!(low.first_alert, Some(sm.dates[0]));
        let high = alert_report(&sm, 1e6, 0.9);
        assert!(!high.triggered && high.first_alert.is_none());
        assert!(high.days.iter().all(|d| d.p_above_threshold == 0.0));
        let json = serde_json::to_value(low.days[0]).unwrap();
        for key in ["date", "p_above_threshold", "kappa_mean", "kappa_q05", "kappa_q95", "increasing_flag"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn trailing_baseline_flags_drop() {
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mut pts: Vec<ConsistencyPoint> = (0..20)
            .map(|k| ConsistencyPoint {
                test_date: add_days(d, k),
                report_date: add_days(d, k + 7),
                lag: 7,
                value: if k == 17 { 0.001 } else { 0.02 + 0.001 * (k % 3) as f64 },
                baseline: None,
                flagged: false,
            })
            .collect();
        flag_low(&mut pts, &MonitorConfig::default());
        assert!(pts[..14].iter().all(|p| p.baseline.is_none()));
        assert_relative_eq!(pts[14].baseline.unwrap(), 0.02);
        let flagged: Vec<usize> = (0..20).filter(|k| pts[*k].flagged).collect();
        assert_eq!(flagged, vec![17]);
    }
}
