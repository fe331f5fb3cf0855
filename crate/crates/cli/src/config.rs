//! Flat key-value run configuration read from a TOML file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lagcast::baselines::{KalmanParams, WaWindow};
use lagcast::inference::{BetaBinomialParams, TruncationRule};
use lagcast::ingest::ConvergenceRule;
use lagcast::monitor::MonitorConfig;
use lagcast::priors::PriorConfig;
use lagcast::simulator::{Fault, ScenarioConfig, WeekendEffect};
use lagcast::smc::{BetaPrior, GammaPrior, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub sigma: f64,
    pub particles: usize,
    pub smooth_particles: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub init_burn_in: usize,
    pub init_thin: usize,
    pub evidence_draws: usize,
    pub proposal_scale: Option<f64>,
    pub weekend: bool,
    pub weekend_a: f64,
    pub weekend_b: f64,
    pub lambda0_shape: Option<f64>,
    pub lambda0_rate: Option<f64>,
    pub tail_sds: f64,
    pub tail_offset: u64,

    pub sigma_grid: Vec<f64>,
    pub threshold: Option<f64>,
    pub trigger: f64,

    pub prior_window: usize,
    pub max_lag: u32,
    pub epsilon: f64,
    pub hops: usize,
    pub fallback_alpha: f64,
    pub fallback_beta: f64,
    pub graph: Option<String>,

    pub convergence_lag: u32,
    pub stable_reports: usize,
    pub stable_min_lag: u32,
    pub max_malformed: f64,

    pub monitor_lag: u32,
    pub monitor_window: usize,
    pub monitor_quantile: f64,

    pub wa_window: WaWindow,
    pub kalman_sigma2: f64,
    pub kalman_sigma_y2: f64,

    pub areas: Vec<String>,

    pub sim_area: String,
    #[serde(deserialize_with = "date::required")]
    pub sim_start: NaiveDate,
    pub sim_days: usize,
    pub sim_sigma: f64,
    pub sim_lambda0: f64,
    pub sim_kappa0: f64,
    pub sim_weekend_z: Option<f64>,
    pub sim_weekend_a: Option<f64>,
    pub sim_weekend_b: Option<f64>,
    pub sim_theta_means: Vec<f64>,
    pub sim_theta_strength: f64,
    pub sim_report_tail: u32,
    #[serde(deserialize_with = "date::optional")]
    pub sim_fault_start: Option<NaiveDate>,
    #[serde(deserialize_with = "date::optional")]
    pub sim_fault_end: Option<NaiveDate>,
    pub sim_fault_fraction: f64,
}

/// Dates may be written as bare TOML dates or as strings.
mod date {
    use chrono::NaiveDate;
    use serde::{de::Error, Deserialize, Deserializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Text(String),
        Toml(toml::value::Datetime),
    }

    fn parse<E: Error>(raw: Raw) -> Result<NaiveDate, E> {
        let text = match raw {
            Raw::Text(s) => s,
            Raw::Toml(d) => d.to_string(),
        };
        NaiveDate::parse_from_str(&text, "%Y-%m-%d").map_err(|e| E::custom(format!("date {text:?}: {e}")))
    }

    pub fn required<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        parse(Raw::deserialize(d)?)
    }

    pub fn optional<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        Option::<Raw>::deserialize(d)?.map(parse).transpose()
    }
}

impl Default for Config {
    fn default() -> Self {
        let run = RunConfig::default();
        let prior = PriorConfig::default();
        let conv = ConvergenceRule::default();
        let mon = MonitorConfig::default();
        let sim = ScenarioConfig::default();
        Self {
            seed: 0,
            sigma: run.sigma,
            particles: run.n_particles,
            smooth_particles: run.m_smooth,
            burn_in: run.burn_in,
            thin: run.thin,
            init_burn_in: run.init_burn_in,
            init_thin: run.init_thin,
            evidence_draws: run.evidence_draws,
            proposal_scale: None,
            weekend: true,
            weekend_a: 1.0,
            weekend_b: 1.0,
            lambda0_shape: None,
            lambda0_rate: None,
            tail_sds: run.trunc.tail_sds,
            tail_offset: run.trunc.offset,
            sigma_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            threshold: None,
            trigger: 0.9,
            prior_window: prior.window,
            max_lag: prior.max_lag,
            epsilon: prior.epsilon,
            hops: prior.hops,
            fallback_alpha: prior.fallback.alpha,
            fallback_beta: prior.fallback.beta,
            graph: None,
            convergence_lag: conv.min_lag,
            stable_reports: conv.stable_reports,
            stable_min_lag: conv.stable_min_lag,
            max_malformed: 0.01,
            monitor_lag: 1,
            monitor_window: mon.window,
            monitor_quantile: mon.quantile,
            wa_window: WaWindow::Literal,
            kalman_sigma2: 25.0,
            kalman_sigma_y2: 100.0,
            areas: Vec::new(),
            sim_area: sim.area_id,
            sim_start: sim.start_date,
            sim_days: sim.days,
            sim_sigma: sim.sigma_true,
            sim_lambda0: sim.lambda0,
            sim_kappa0: sim.kappa0,
            sim_weekend_z: None,
            sim_weekend_a: None,
            sim_weekend_b: None,
            sim_theta_means: sim.theta_schedule.iter().map(|p| p.mean()).collect(),
            sim_theta_strength: 100.0,
            sim_report_tail: sim.report_tail,
            sim_fault_start: None,
            sim_fault_end: None,
            sim_fault_fraction: 0.5,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let lambda0_prior = match (self.lambda0_shape, self.lambda0_rate) {
            (Some(shape), rate) => Some(GammaPrior {
                shape,
                rate: rate.unwrap_or(1.0),
            }),
            (None, Some(_)) => bail!("lambda0_rate needs lambda0_shape"),
            (None, None) => None,
        };
        let cfg = RunConfig {
            sigma: self.sigma,
            n_particles: self.particles,
            m_smooth: self.smooth_particles,
            weekend_prior: self.weekend.then_some(BetaPrior {
                a: self.weekend_a,
                b: self.weekend_b,
            }),
            lambda0_prior,
            burn_in: self.burn_in,
            thin: self.thin,
            init_burn_in: self.init_burn_in,
            init_thin: self.init_thin,
            proposal_scale: self.proposal_scale,
            evidence_draws: self.evidence_draws,
            trunc: TruncationRule {
                tail_sds: self.tail_sds,
                offset: self.tail_offset,
            },
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        Ok(PriorConfig {
            window: self.prior_window,
            max_lag: self.max_lag,
            epsilon: self.epsilon,
            hops: self.hops,
            fallback: BetaBinomialParams::new(self.fallback_alpha, self.fallback_beta)?,
        })
    }

    pub fn convergence(&self) -> ConvergenceRule {
        ConvergenceRule {
            min_lag: self.convergence_lag,
            stable_reports: self.stable_reports,
            stable_min_lag: self.stable_min_lag,
        }
    }

    pub fn monitor(&self) -> MonitorConfig {
        MonitorConfig {
            window: self.monitor_window,
            quantile: self.monitor_quantile,
        }
    }

    pub fn kalman(&self, mu: f64) -> KalmanParams {
        KalmanParams {
            mu,
            sigma2: self.kalman_sigma2,
            sigma_y2: self.kalman_sigma_y2,
        }
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let weekend = match (self.sim_weekend_z, self.sim_weekend_a, self.sim_weekend_b) {
            (Some(z), None, None) => WeekendEffect::Fixed { z },
            (None, Some(a), Some(b)) => WeekendEffect::Beta { a, b },
            (None, None, None) => WeekendEffect::Fixed { z: 1.0 },
            _ => bail!("set either sim_weekend_z or both sim_weekend_a and sim_weekend_b"),
        };
        let theta_schedule = self
            .sim_theta_means
            .iter()
            .map(|m| {
                BetaBinomialParams::new(self.sim_theta_strength * m, self.sim_theta_strength * (1.0 - m))
                    .with_context(|| format!("theta mean {m}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let faults = match (self.sim_fault_start, self.sim_fault_end) {
            (Some(start), Some(end)) => vec![Fault {
                start,
                end,
                fraction: self.sim_fault_fraction,
            }],
            (None, None) => Vec::new(),
            _ => bail!("set both sim_fault_start and sim_fault_end"),
        };
        let cfg = ScenarioConfig {
            area_id: self.sim_area.clone(),
            start_date: self.sim_start,
            days: self.sim_days,
            sigma_true: self.sim_sigma,
            lambda0: self.sim_lambda0,
            kappa0: self.sim_kappa0,
            lambda_floor: 1e-3,
            weekend,
            theta_schedule,
            report_tail: self.sim_report_tail,
            faults,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config = toml::from_str("sigma = 2.5\nareas = [\"E1\"]\n").unwrap();
        assert_eq!(c.sigma, 2.5);
        assert_eq!(c.particles, 2000);
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("sigmaa = 1.0").is_err());
    }

    #[test]
    fn scenario_from_keys() {
        let c: Config = toml::from_str("sim_weekend_z = 0.6\nsim_fault_start = 2020-10-10\nsim_fault_end = 2020-10-12").unwrap();
        let s = c.scenario().unwrap();
        assert_eq!(s.weekend, WeekendEffect::Fixed { z: 0.6 });
        assert_eq!(s.faults.len(), 1);
        assert_eq!(s.tau(), 4);
        let quoted: Config = toml::from_str("sim_start = \"2021-01-04\"").unwrap();
        assert_eq!(quoted.sim_start, NaiveDate::from_ymd_opt(2021, 1, 4).unwrap());
        assert!(toml::from_str::<Config>("sim_start = \"04/01/2021\"").is_err());
    }
}
