//! Synthetic epidemic series with lagged, thinned cumulative reporting.
//!
//! The intensity follows an integrated Gaussian random walk, true counts are
//! Poisson, and each day's cumulative reports are nested binomial thinnings
//! of the true count so that they never decrease with lag.

use std::io::Write;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{seeded_rng, BetaBinomialParams};
use crate::ingest::{add_days, days_between, LagReport, ReportSnapshot, ReportTriangle, TriangleRow};

pub const TRUTH_HEADER: [&str; 5] = ["date", "lambda", "kappa", "z", "x"];

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeekendEffect {
    Fixed { z: f64 },
    Beta { a: f64, b: f64 },
}

/// Reports whose report date lies in `start..=end` are scaled by `fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub area_id: String,
    pub start_date: NaiveDate,
    /// Number of test days.
    pub days: usize,
    pub sigma_true: f64,
    pub lambda0: f64,
    /// Drift on the first day.
    pub kappa0: f64,
    pub lambda_floor: f64,
    pub weekend: WeekendEffect,
    /// Beta parameters of the reporting rate at lags `1..=tau`; lag `tau + 1`
    /// onwards reports the true count.
    pub theta_schedule: Vec<BetaBinomialParams>,
    /// Report days after the last test day. With 1 the last day has a single
    /// lag-1 report.
    pub report_tail: u32,
    pub faults: Vec<Fault>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let schedule = [0.35, 0.65, 0.85, 0.95]
            .iter()
            .map(|m| BetaBinomialParams::new(100.0 * m, 100.0 * (1.0 - m)).expect("positive"))
            .collect();
        Self {
            area_id: "sim".into(),
            start_date: NaiveDate::from_ymd_opt(2020, 10, 1).expect("valid date"),
            days: 60,
            sigma_true: 5.0,
            lambda0: 200.0,
            kappa0: 0.0,
            lambda_floor: 1e-3,
            weekend: WeekendEffect::Fixed { z: 1.0 },
            theta_schedule: schedule,
            report_tail: 1,
            faults: Vec::new(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn tau(&self) -> u32 {
        self.theta_schedule.len() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_schedule.is_empty() {
            return Err(Error::InvalidInput("theta schedule needs at least one lag".into()));
        }
        if !(self.lambda0 > 0.0) || !(self.lambda_floor > 0.0) {
            return Err(Error::InvalidInput("lambda0 and the floor must be positive".into()));
        }
        if !(self.sigma_true >= 0.0) {
            return Err(Error::InvalidInput("sigma_true must be non-negative".into()));
        }
        if self.days == 0 {
            return Err(Error::InvalidInput("scenario needs at least one day".into()));
        }
        if self.report_tail == 0 {
            return Err(Error::InvalidInput("report_tail must be at least 1".into()));
        }
        match self.weekend {
            WeekendEffect::Fixed { z } if !(0.0..=1.0).contains(&z) => {
                return Err(Error::InvalidInput(format!("weekend z = {z} outside [0, 1]")))
            }
            WeekendEffect::Beta { a, b } if !(a > 0.0 && b > 0.0) => {
                return Err(Error::InvalidInput("weekend beta parameters must be positive".into()))
            }
            _ => {}
        }
        for f in &self.faults {
            if !(0.0..1.0).contains(&f.fraction) {
                return Err(Error::InvalidInput(format!(
                    "fault fraction {} outside [0, 1)",
                    f.fraction
                )));
            }
        }
        Ok(())
    }

    pub fn end_date(&self) -> NaiveDate {
        add_days(self.start_date, self.days as i64 - 1)
    }

    pub fn last_report_date(&self) -> NaiveDate {
        add_days(self.end_date(), self.report_tail as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub date: NaiveDate,
    pub lambda: f64,
    pub kappa: f64,
    pub z: f64,
    pub x: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub config: ScenarioConfig,
    pub truth: Vec<TruthRow>,
    /// Sorted rate draws per day at lags `1..=tau`.
    pub theta: Vec<Vec<f64>>,
    /// Fault-free cumulative reports per day at lags `1..=tau`.
    pub reports: Vec<Vec<u64>>,
    pub snapshots: Vec<ReportSnapshot>,
}

impl SimulatedData {
    /// Fault-free cumulative report for day `t` at `lag`.
    pub fn report(&self, t: usize, lag: u32) -> u64 {
        if lag as usize > self.reports[t].len() {
            self.truth[t].x
        } else {
            self.reports[t][lag as usize - 1]
        }
    }

    /// `y / x` at each lag, undefined (`None`) when `x = 0`.
    pub fn realized_rates(&self, t: usize) -> Option<Vec<f64>> {
        let x = self.truth[t].x;
        (x > 0).then(|| self.reports[t].iter().map(|y| *y as f64 / x as f64).collect())
    }

    /// The fault-free triangle seen on the last report date, built directly
    /// from the internal table rather than from snapshots.
    pub fn triangle(&self) -> ReportTriangle {
        let last = self.config.last_report_date();
        let rows = self
            .truth
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let max_lag = days_between(row.date, last) as u32;
                TriangleRow {
                    test_date: row.date,
                    first_lag: 1,
                    reports: (1..=max_lag)
                        .map(|lag| LagReport {
                            count: self.report(t, lag),
                            missing: false,
                            over_report: false,
                        })
                        .collect(),
                    converged: false,
                    final_count: None,
                }
            })
            .collect();
        ReportTriangle {
            area_id: self.config.area_id.clone(),
            rows,
        }
    }

    pub fn write_truth_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_truth_csv(&self.truth, writer)
    }
}

pub fn write_truth_csv<W: Write>(truth: &[TruthRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TRUTH_HEADER)?;
    for r in truth {
        wtr.write_record([
            r.date.to_string(),
            format!("{}", r.lambda),
            format!("{}", r.kappa),
            format!("{}", r.z),
            r.x.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn beta_draw<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    Beta::new(a, b).expect("valid beta").sample(rng)
}

pub fn generate(config: &ScenarioConfig) -> Result<SimulatedData> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, 0);
    let step = Normal::new(0.0, config.sigma_true).expect("non-negative scale");
    let tau = config.tau() as usize;

    let mut truth = Vec::with_capacity(config.days);
    let mut theta = Vec::with_capacity(config.days);
    let mut reports = Vec::with_capacity(config.days);
    let mut lambda = config.lambda0;
    let mut kappa = config.kappa0;
    for t in 0..config.days {
        let date = add_days(config.start_date, t as i64);
        if t > 0 {
            kappa += step.sample(&mut rng);
            lambda = (lambda + kappa).max(config.lambda_floor);
        }
        let z = if is_weekend(date) {
            match config.weekend {
                WeekendEffect::Fixed { z } => z,
                WeekendEffect::Beta { a, b } => beta_draw(&mut rng, a, b),
            }
        } else {
            1.0
        };
        let mu = z * lambda;
        let x = if mu > 0.0 {
            Poisson::new(mu).expect("positive mean").sample(&mut rng) as u64
        } else {
            0
        };

        let mut th: Vec<f64> = config
            .theta_schedule
            .iter()
            .map(|p| beta_draw(&mut rng, p.alpha, p.beta))
            .collect();
        th.sort_by(f64::total_cmp);
        // Nested thinning from the top lag down keeps reports monotone while
        // y^(j) ~ Binomial(x, theta_j) marginally.
        let mut ys = vec![0u64; tau];
        let mut above = x;
        let mut theta_above = 1.0;
        for j in (0..tau).rev() {
            let p = if theta_above > 0.0 { th[j] / theta_above } else { 0.0 };
            above = binomial(&mut rng, above, p);
            ys[j] = above;
            theta_above = th[j];
        }

        truth.push(TruthRow {
            date,
            lambda,
            kappa,
            z,
            x,
        });
        theta.push(th);
        reports.push(ys);
    }

    let mut data = SimulatedData {
        config: config.clone(),
        truth,
        theta,
        reports,
        snapshots: Vec::new(),
    };
    let mut snapshots = assemble_snapshots(&data);
    for f in &config.faults {
        snapshots = inject_fault(snapshots, f.start, f.end, f.fraction)?;
    }
    data.snapshots = snapshots;
    Ok(data)
}

fn assemble_snapshots(data: &SimulatedData) -> Vec<ReportSnapshot> {
    let cfg = &data.config;
    let first = add_days(cfg.start_date, 1);
    let n_reports = days_between(first, cfg.last_report_date()) + 1;
    (0..n_reports)
        .map(|k| {
            let report_date = add_days(first, k);
            let mut snap = ReportSnapshot::new(report_date);
            for (t, row) in data.truth.iter().enumerate() {
                if row.date >= report_date {
                    break;
                }
                let lag = days_between(row.date, report_date) as u32;
                snap.insert(&cfg.area_id, row.date, data.report(t, lag))
                    .expect("test date precedes report date");
            }
            snap
        })
        .collect()
}

/// Scales every report published on a date in `start..=end` by `fraction`,
/// rounding down. An inverted window leaves the snapshots unchanged.
pub fn inject_fault(
    mut snapshots: Vec<ReportSnapshot>,
    start: NaiveDate,
    end: NaiveDate,
    fraction: f64,
) -> Result<Vec<ReportSnapshot>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("fault fraction {fraction} outside [0, 1)")));
    }
    for snap in snapshots.iter_mut() {
        if snap.report_date < start || snap.report_date > end {
            continue;
        }
        for count in snap.entries.values_mut() {
            *count = (*count as f64 * fraction).floor() as u64;
        }
    }
    Ok(snapshots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_triangle;

    #[test]
    fn constant_intensity_without_drift() {
        let cfg = ScenarioConfig {
            days: 400,
            sigma_true: 0.0,
            lambda0: 30.0,
            seed: 3,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        assert!(data.truth.iter().all(|r| r.lambda == 30.0));
        let xs: Vec<f64> = data.truth.iter().map(|r| r.x as f64).collect();
        let m = crate::dist::mean(&xs);
        let se = (30.0f64 / xs.len() as f64).sqrt();
        assert!((m - 30.0).abs() < 3.0 * se, "mean {m}");
    }

    #[test]
    fn exact_reporting_reports_truth_immediately() {
        let cfg = ScenarioConfig {
            days: 20,
            theta_schedule: vec![BetaBinomialParams::new(1e12, 1e-12).unwrap(); 3],
            seed: 1,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        for snap in &data.snapshots {
            for ((_, date), count) in &snap.entries {
                let t = days_between(cfg.start_date, *date) as usize;
                assert_eq!(*count, data.truth[t].x);
            }
        }
    }

    #[test]
    fn reports_are_monotone_and_converge() {
        let data = generate(&ScenarioConfig {
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        for (t, ys) in data.reports.iter().enumerate() {
            assert!(ys.windows(2).all(|w| w[0] <= w[1]));
            assert!(*ys.last().unwrap() <= data.truth[t].x);
            assert_eq!(data.report(t, 5), data.truth[t].x);
        }
        assert!(data.theta.iter().all(|th| th.windows(2).all(|w| w[0] <= w[1])));
    }

    #[test]
    fn snapshots_rebuild_internal_table() {
        let data = generate(&ScenarioConfig {
            days: 30,
            report_tail: 3,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let tri = build_triangle(&data.snapshots, "sim").unwrap();
        assert_eq!(tri, data.triangle());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = ScenarioConfig {
            seed: 12,
            weekend: WeekendEffect::Beta { a: 6.0, b: 4.0 },
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn fault_scales_reports_in_window() {
        let cfg = ScenarioConfig {
            days: 10,
            seed: 2,
            ..Default::default()
        };
        let clean = generate(&cfg).unwrap();
        let d = add_days(cfg.start_date, 5);
        let zeroed = inject_fault(clean.snapshots.clone(), d, d, 0.0).unwrap();
        for (a, b) in clean.snapshots.iter().zip(&zeroed) {
            if a.report_date == d {
                assert!(b.entries.values().all(|c| *c == 0));
            } else {
                assert_eq!(a, b);
            }
        }
        let noop = inject_fault(clean.snapshots.clone(), d, add_days(d, -1), 0.5).unwrap();
        assert_eq!(noop, clean.snapshots);
        assert!(inject_fault(clean.snapshots.clone(), d, d, 1.0).is_err());
    }
}
