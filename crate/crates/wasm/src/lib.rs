//! Thin wasm-bindgen layer for the static demo page. Every export returns a
//! JSON string; errors surface as JS exceptions.

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use lagcast::inference::beta_binomial_pmf;
use lagcast::ingest::{mark_convergence, ConvergenceRule, ReportTriangle};
use lagcast::monitor::select_sigma;
use lagcast::priors::{build_prior_table, fit_rate_moments, temporal_theta_estimate, PriorConfig};
use lagcast::simulator::{generate, ScenarioConfig, SimulatedData, WeekendEffect};
use lagcast::smc::{run, Model, RunConfig, Series};

#[derive(Debug, Clone, Copy)]
pub struct Demo {
    pub days: usize,
    pub lambda0: f64,
    pub sigma_true: f64,
    pub weekend_z: f64,
    pub particles: usize,
    pub seed: u64,
}

impl Demo {
    fn simulate(&self) -> lagcast::Result<(SimulatedData, ReportTriangle)> {
        let sim = generate(&ScenarioConfig {
            days: self.days,
            lambda0: self.lambda0,
            sigma_true: self.sigma_true,
            weekend: WeekendEffect::Fixed { z: self.weekend_z },
            seed: self.seed,
            ..Default::default()
        })?;
        let tri = mark_convergence(sim.triangle(), &ConvergenceRule::default());
        Ok((sim, tri))
    }

    fn model(&self, tri: &ReportTriangle, sigma: f64) -> lagcast::Result<(Model, RunConfig)> {
        let cfg = RunConfig {
            sigma,
            n_particles: self.particles,
            m_smooth: self.particles,
            seed: self.seed,
            ..Default::default()
        };
        let cfg = RunConfig {
            weekend_prior: cfg.weekend_prior.filter(|_| self.weekend_z < 1.0),
            ..cfg
        };
        let priors = build_prior_table(std::slice::from_ref(tri), None, &PriorConfig::default());
        Ok((Model::new(Series::latest(tri), &priors, &cfg)?, cfg))
    }
}

#[derive(Serialize)]
struct NowcastView {
    dates: Vec<String>,
    truth: Vec<u64>,
    truth_lambda: Vec<f64>,
    reported: Vec<Option<u64>>,
    x_mean: Vec<f64>,
    x_q05: Vec<u64>,
    x_q95: Vec<u64>,
    z_mean: Vec<f64>,
    log_evidence: f64,
}

pub fn nowcast_view(demo: &Demo, sigma: f64) -> lagcast::Result<Value> {
    let (sim, tri) = demo.simulate()?;
    let (model, cfg) = demo.model(&tri, sigma)?;
    let out = run(&model, &cfg)?;
    let sums = out.summaries(&model);
    let view = NowcastView {
        dates: model.series.dates.iter().map(|d| d.to_string()).collect(),
        truth: sim.truth.iter().map(|r| r.x).collect(),
        truth_lambda: sim.truth.iter().map(|r| r.lambda).collect(),
        reported: model.series.obs.iter().map(|o| o.map(|o| o.count)).collect(),
        x_mean: sums.iter().map(|s| s.x_mean).collect(),
        x_q05: sums.iter().map(|s| s.x_q05).collect(),
        x_q95: sums.iter().map(|s| s.x_q95).collect(),
        z_mean: sums.iter().map(|s| s.z_mean).collect(),
        log_evidence: out.log_evidence(),
    };
    Ok(serde_json::to_value(view).expect("plain data serializes"))
}

pub fn prior_view(rates: &[f64], n: u32) -> lagcast::Result<Value> {
    let (m, v) = temporal_theta_estimate(rates)?;
    let p = fit_rate_moments(m, v, PriorConfig::default().epsilon)?;
    let pmf: Vec<f64> = (0..=n as u64).map(|y| beta_binomial_pmf(y, n as u64, &p)).collect();
    Ok(json!({ "mean": m, "variance": v, "alpha": p.alpha, "beta": p.beta, "pmf": pmf }))
}

pub fn scan_view(demo: &Demo, grid: &[f64]) -> lagcast::Result<Value> {
    let (_, tri) = demo.simulate()?;
    let (model, cfg) = demo.model(&tri, grid.first().copied().unwrap_or(1.0))?;
    Ok(serde_json::to_value(select_sigma(&model, grid, &cfg)?).expect("plain data serializes"))
}

fn js(r: lagcast::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Simulates a series and returns the smoothed now-cast next to the truth.
#[wasm_bindgen]
pub fn simulate_and_nowcast(
    days: usize,
    lambda0: f64,
    sigma_true: f64,
    weekend_z: f64,
    sigma: f64,
    particles: usize,
    seed: u64,
) -> Result<String, JsError> {
    let demo = Demo {
        days,
        lambda0,
        sigma_true,
        weekend_z,
        particles,
        seed,
    };
    js(nowcast_view(&demo, sigma))
}

/// Fits a beta prior to observed reporting rates and returns the implied
/// distribution of reports out of `n` true cases.
#[wasm_bindgen]
pub fn beta_prior_fit(rates: &[f64], n: u32) -> Result<String, JsError> {
    js(prior_view(rates, n))
}

/// Log evidence of a simulated series over a grid of drift scales.
#[wasm_bindgen]
pub fn sigma_scan(
    days: usize,
    lambda0: f64,
    sigma_true: f64,
    grid: &[f64],
    particles: usize,
    seed: u64,
) -> Result<String, JsError> {
    let demo = Demo {
        days,
        lambda0,
        sigma_true,
        weekend_z: 1.0,
        particles,
        seed,
    };
    js(scan_view(&demo, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Demo {
        Demo {
            days: 20,
            lambda0: 200.0,
            sigma_true: 3.0,
            weekend_z: 0.7,
            particles: 200,
            seed: 4,
        }
    }

    #[test]
    fn nowcast_has_one_entry_per_day() {
        let v = nowcast_view(&demo(), 3.0).unwrap();
        for key in ["dates", "truth", "reported", "x_mean", "x_q05", "x_q95"] {
            assert_eq!(v[key].as_array().unwrap().len(), 20, "{key}");
        }
        assert!(v["log_evidence"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn prior_pmf_sums_to_one() {
        let v = prior_view(&[0.5, 0.6, 0.55, 0.62], 30).unwrap();
        let total: f64 = v["pmf"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(prior_view(&[0.5], 10).is_err());
    }

    #[test]
    fn scan_picks_a_grid_value() {
        let v = scan_view(&demo(), &[1.0, 5.0]).unwrap();
        let best = v["best"].as_f64().unwrap();
        assert!(best == 1.0 || best == 5.0);
    }
}
