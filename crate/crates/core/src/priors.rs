//! Empirical-Bayes beta priors on lag-wise reporting rates.
//!
//! Rates are measured on converged history, either from the area's own recent
//! days (temporal) or from its n-hop neighbours on the adjacency graph
//! (spatial), then turned into `Beta(alpha, beta)` by moment matching.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dist::{mean, population_variance};
use crate::error::{Error, Result};
use crate::inference::BetaBinomialParams;
use crate::ingest::{parse_date, reporting_rate, AdjacencyGraph, ReportTriangle};

pub const PRIOR_HEADER: [&str; 7] = [
    "area_id",
    "lag",
    "alpha",
    "beta",
    "source",
    "window_start",
    "window_end",
];

/// Concentration used when every observed rate is (numerically) 0 or 1.
pub const SATURATED_STRENGTH: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    Temporal,
    Spatial,
    Fallback,
}

impl PriorSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorSource::Temporal => "temporal",
            PriorSource::Spatial => "spatial",
            PriorSource::Fallback => "fallback",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "temporal" => Some(PriorSource::Temporal),
            "spatial" => Some(PriorSource::Spatial),
            "fallback" => Some(PriorSource::Fallback),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagPrior {
    pub params: BetaBinomialParams,
    pub source: PriorSource,
    pub window: Option<(NaiveDate, NaiveDate)>,
}

/// Per `(area, lag)` beta priors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LagPriorTable {
    entries: BTreeMap<String, BTreeMap<u32, LagPrior>>,
}

impl LagPriorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, area: &str, lag: u32, prior: LagPrior) {
        self.entries.entry(area.to_string()).or_default().insert(lag, prior);
    }

    pub fn get(&self, area: &str, lag: u32) -> Option<&LagPrior> {
        self.entries.get(area)?.get(&lag)
    }

    /// Prior for `lag`, falling back to the largest tabulated lag below it.
    /// Reports beyond the table's last lag use its last entry.
    pub fn lookup(&self, area: &str, lag: u32) -> Option<&LagPrior> {
        self.entries.get(area)?.range(..=lag).next_back().map(|(_, p)| p)
    }

    pub fn areas(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn lags(&self, area: &str) -> Vec<u32> {
        self.entries
            .get(area)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, &LagPrior)> {
        self.entries
            .iter()
            .flat_map(|(a, m)| m.iter().map(move |(l, p)| (a.as_str(), *l, p)))
    }

    /// The same beta prior at every lag `1..=max_lag`.
    pub fn uniform_for(area: &str, max_lag: u32, params: BetaBinomialParams) -> Self {
        let mut t = Self::new();
        for lag in 1..=max_lag {
            t.insert(
                area,
                lag,
                LagPrior {
                    params,
                    source: PriorSource::Fallback,
                    window: None,
                },
            );
        }
        t
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(PRIOR_HEADER)?;
        for (area, lag, p) in self.iter() {
            let (ws, we) = match p.window {
                Some((s, e)) => (s.to_string(), e.to_string()),
                None => (String::new(), String::new()),
            };
            wtr.write_record([
                area,
                &lag.to_string(),
                &format!("{:e}", p.params.alpha),
                &format!("{:e}", p.params.beta),
                p.source.as_str(),
                &ws,
                &we,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != PRIOR_HEADER {
            return Err(Error::InvalidInput(format!(
                "expected header {}, found {}",
                PRIOR_HEADER.join(","),
                header.join(",")
            )));
        }
        let mut table = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |message: String| Error::Parse {
                path: source.to_string(),
                line,
                message,
            };
            if rec.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", rec.len())));
            }
            let lag: u32 = rec[1].trim().parse().map_err(|_| bad("bad lag".into()))?;
            let alpha: f64 = rec[2].trim().parse().map_err(|_| bad("bad alpha".into()))?;
            let beta: f64 = rec[3].trim().parse().map_err(|_| bad("bad beta".into()))?;
            let params = BetaBinomialParams::new(alpha, beta).map_err(|e| bad(e.to_string()))?;
            let src = PriorSource::parse(rec[4].trim()).ok_or_else(|| bad("bad source".into()))?;
            let window = match (rec[5].trim(), rec[6].trim()) {
                ("", "") => None,
                (s, e) => Some((
                    parse_date(s).map_err(|e| bad(e.to_string()))?,
                    parse_date(e).map_err(|e| bad(e.to_string()))?,
                )),
            };
            table.insert(
                rec[0].trim(),
                lag,
                LagPrior {
                    params,
                    source: src,
                    window,
                },
            );
        }
        Ok(table)
    }
}

/// Mean and population variance of reporting rates over a stable window.
pub fn temporal_theta_estimate(rates: &[f64]) -> Result<(f64, f64)> {
    if rates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "temporal estimate needs at least 2 rates, got {}",
            rates.len()
        )));
    }
    Ok((mean(rates), population_variance(rates)))
}

/// Rates at `lag` over the `window` most recent converged days, optionally
/// only those strictly before `before` (leave-current-day-out). Returns the
/// rates and the date span they cover.
pub fn temporal_window_rates(
    triangle: &ReportTriangle,
    lag: u32,
    window: usize,
    before: Option<NaiveDate>,
) -> (Vec<f64>, Option<(NaiveDate, NaiveDate)>) {
    let mut picked: Vec<(NaiveDate, f64)> = Vec::new();
    for row in triangle.rows.iter().rev() {
        if picked.len() == window {
            break;
        }
        if before.is_some_and(|b| row.test_date >= b) || !row.converged {
            continue;
        }
        if let Ok(rate) = reporting_rate(triangle, row.test_date, lag) {
            picked.push((row.test_date, rate));
        }
    }
    let span = match (picked.last(), picked.first()) {
        (Some(first), Some(last)) => Some((first.0, last.0)),
        _ => None,
    };
    (picked.into_iter().map(|(_, r)| r).collect(), span)
}

/// Unweighted mean of neighbour rates over the n-hop neighbourhood of `area`
/// (the area itself excluded).
pub fn spatial_theta_estimate(
    graph: &AdjacencyGraph,
    area: &str,
    hops: usize,
    rates_by_area: &BTreeMap<String, f64>,
) -> Result<f64> {
    let hood = graph.n_hop(area, hops);
    if hood.is_empty() {
        return Err(Error::InsufficientData(format!("{area} has no {hops}-hop neighbours")));
    }
    let mut sum = 0.0;
    for nb in &hood {
        sum += rates_by_area.get(nb).ok_or_else(|| {
            Error::InsufficientData(format!("neighbour {nb} of {area} has no rate"))
        })?;
    }
    Ok(sum / hood.len() as f64)
}

/// Beta parameters matching mean `m` and variance `min(v, m(1-m) - eps)`.
/// A zero variance carries no spread information and is clipped to the
/// upper bound.
pub fn moment_match_beta(m: f64, v: f64, epsilon: f64) -> Result<BetaBinomialParams> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::Domain(format!("mean {m} is outside (0, 1)")));
    }
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("variance {v} must be non-negative")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    let bound = m * (1.0 - m) - epsilon;
    if !(bound > 0.0) {
        return Err(Error::Domain(format!(
            "m(1-m) = {} does not exceed epsilon = {epsilon}",
            m * (1.0 - m)
        )));
    }
    let nu = if v == 0.0 { bound } else { v.min(bound) };
    let alpha = m * m * (1.0 - m) / nu - m;
    let beta = alpha * (1.0 - m) / m;
    BetaBinomialParams::new(alpha, beta)
}

/// Knobs for [`build_prior_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Number of most recent converged days used per lag.
    pub window: usize,
    pub max_lag: u32,
    pub epsilon: f64,
    pub hops: usize,
    pub fallback: BetaBinomialParams,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            window: 14,
            max_lag: 7,
            epsilon: 1e-6,
            hops: 2,
            fallback: BetaBinomialParams::uniform(),
        }
    }
}

/// Fits a prior to rate moments, handling rates pinned at 0 or 1 where the
/// moment equations have no solution.
pub fn fit_rate_moments(m: f64, v: f64, epsilon: f64) -> Result<BetaBinomialParams> {
    if m * (1.0 - m) <= 2.0 * epsilon {
        return if m >= 0.5 {
            BetaBinomialParams::new(SATURATED_STRENGTH, 1.0)
        } else {
            BetaBinomialParams::new(1.0, SATURATED_STRENGTH)
        };
    }
    moment_match_beta(m, v, epsilon)
}

fn spatial_series(
    triangles: &BTreeMap<&str, &ReportTriangle>,
    graph: &AdjacencyGraph,
    area: &str,
    lag: u32,
    config: &PriorConfig,
) -> (Vec<f64>, Option<(NaiveDate, NaiveDate)>) {
    let hood = graph.n_hop(area, config.hops);
    if hood.is_empty() {
        return (Vec::new(), None);
    }
    let Some(end) = triangles.get(area).and_then(|t| t.end_date()) else {
        return (Vec::new(), None);
    };
    let Some(start) = hood
        .iter()
        .filter_map(|a| triangles.get(a.as_str()).and_then(|t| t.start_date()))
        .min()
    else {
        return (Vec::new(), None);
    };
    let mut picked: Vec<(NaiveDate, f64)> = Vec::new();
    let mut date = end;
    while date >= start && picked.len() < config.window {
        let rates: BTreeMap<String, f64> = hood
            .iter()
            .filter_map(|a| {
                let tri = triangles.get(a.as_str())?;
                reporting_rate(tri, date, lag).ok().map(|r| (a.clone(), r))
            })
            .collect();
        if let Ok(est) = spatial_theta_estimate(graph, area, config.hops, &rates) {
            picked.push((date, est));
        }
        date = date.pred_opt().expect("date in range");
    }
    let span = match (picked.last(), picked.first()) {
        (Some(first), Some(last)) => Some((first.0, last.0)),
        _ => None,
    };
    (picked.into_iter().map(|(_, r)| r).collect(), span)
}

/// Priors for every area and lag `1..=max_lag`: temporal when the area has at
/// least two usable converged days, else spatial from its neighbours, else
/// the fallback.
pub fn build_prior_table(
    triangles: &[ReportTriangle],
    graph: Option<&AdjacencyGraph>,
    config: &PriorConfig,
) -> LagPriorTable {
    let by_area: BTreeMap<&str, &ReportTriangle> =
        triangles.iter().map(|t| (t.area_id.as_str(), t)).collect();
    let mut table = LagPriorTable::new();
    for tri in triangles {
        for lag in 1..=config.max_lag {
            let (rates, window) = temporal_window_rates(tri, lag, config.window, None);
            let fitted = temporal_theta_estimate(&rates)
                .and_then(|(m, v)| fit_rate_moments(m, v, config.epsilon))
                .map(|p| (p, PriorSource::Temporal, window));
            let fitted = fitted.or_else(|_| {
                let g = graph.ok_or_else(|| Error::InsufficientData("no graph".into()))?;
                let (rates, window) = spatial_series(&by_area, g, &tri.area_id, lag, config);
                temporal_theta_estimate(&rates)
                    .and_then(|(m, v)| fit_rate_moments(m, v, config.epsilon))
                    .map(|p| (p, PriorSource::Spatial, window))
            });
            let prior = match fitted {
                Ok((params, source, window)) => LagPrior {
                    params,
                    source,
                    window,
                },
                Err(_) => LagPrior {
                    params: config.fallback,
                    source: PriorSource::Fallback,
                    window: None,
                },
            };
            table.insert(&tri.area_id, lag, prior);
        }
    }
    table
}
