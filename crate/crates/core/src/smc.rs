//! Marginalized particle filtering and smoothing for the latent intensity
//! `lambda`, its drift `kappa` and the weekend multiplier `z`.
//!
//! Each filtering distribution is sampled directly by Metropolis-Hastings on
//! the mixture formed by pushing the previous atoms through the random-walk
//! transition. The state of the chain is `(ancestor, kappa, z)`; the intensity
//! follows as `lambda = Lambda[ancestor] + kappa`. Smoothing resamples the
//! filtering atoms backwards by matching ancestor indices, and count posteriors
//! are recovered from the smoothing atoms in closed form.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use log::warn;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{mean, AtomSummary, CountPmf};
use crate::error::{Error, Result};
use crate::inference::{
    ln_beta_binomial_pmf, ln_beta_density, ln_factorial, ln_gamma_density, ln_normal_density,
    seeded_rng, BetaBinomialParams, SmcRng, ThinnedPoisson, TruncationRule,
};
use crate::ingest::{add_days, ReportTriangle};
use crate::par;
use crate::priors::LagPriorTable;
use crate::simulator::is_weekend;

const SMOOTH_STREAM: u64 = 1 << 32;
const EVIDENCE_STREAM: u64 = 2 << 32;
const PREDICT_STREAM: u64 = 3 << 32;
const MAX_PRIOR_TRIES: usize = 10_000;
const Z_GRID: usize = 200;

/// Latest cumulative report for one day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub lag: u32,
    pub count: u64,
}

/// One area's daily observations as seen by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub area_id: String,
    pub dates: Vec<NaiveDate>,
    pub obs: Vec<Option<Observation>>,
    pub final_counts: Vec<Option<u64>>,
}

impl Series {
    pub fn new(area_id: &str, start: NaiveDate, obs: Vec<Option<Observation>>) -> Self {
        let n = obs.len();
        Self {
            area_id: area_id.to_string(),
            dates: (0..n).map(|k| add_days(start, k as i64)).collect(),
            final_counts: vec![None; n],
            obs,
        }
    }

    /// Each day's most recent non-missing report.
    pub fn latest(triangle: &ReportTriangle) -> Self {
        Self::from_rows(triangle, |row| {
            row.latest_observed().map(|(lag, count)| Observation { lag, count })
        })
    }

    /// Each day's report at exactly `lag`, where one has been published.
    pub fn at_lag(triangle: &ReportTriangle, lag: u32) -> Self {
        Self::from_rows(triangle, |row| {
            row.report(lag)
                .filter(|r| !r.missing)
                .map(|r| Observation { lag, count: r.count })
        })
    }

    fn from_rows<F>(triangle: &ReportTriangle, f: F) -> Self
    where
        F: Fn(&crate::ingest::TriangleRow) -> Option<Observation>,
    {
        Self {
            area_id: triangle.area_id.clone(),
            dates: triangle.dates(),
            obs: triangle.rows.iter().map(&f).collect(),
            final_counts: triangle.rows.iter().map(|r| r.final_count).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Appends `days` dates with no reports (pure prediction).
    pub fn extend(&mut self, days: usize) {
        for _ in 0..days {
            let next = match self.dates.last() {
                Some(d) => add_days(*d, 1),
                None => return,
            };
            self.dates.push(next);
            self.obs.push(None);
            self.final_counts.push(None);
        }
    }

    /// The first `len` days.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            area_id: self.area_id.clone(),
            dates: self.dates[..len].to_vec(),
            obs: self.obs[..len].to_vec(),
            final_counts: self.final_counts[..len].to_vec(),
        }
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.iter().position(|d| *d == date)
    }

    /// Gamma prior on the first intensity: shape from the mean of the
    /// converged counts in the first two weeks (or of the reports there if
    /// none), rate 1.
    pub fn default_lambda0_prior(&self) -> GammaPrior {
        const DAYS: usize = 14;
        let converged: Vec<f64> = self
            .final_counts
            .iter()
            .take(DAYS)
            .flatten()
            .map(|x| *x as f64)
            .collect();
        let m = if converged.is_empty() {
            let obs: Vec<f64> = self.obs.iter().take(DAYS).flatten().map(|o| o.count as f64).collect();
            if obs.is_empty() {
                1.0
            } else {
                mean(&obs)
            }
        } else {
            mean(&converged)
        };
        GammaPrior {
            shape: m.max(0.5),
            rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("valid gamma")
            .sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        Beta::new(self.a, self.b).expect("valid beta").sample(rng)
    }

    fn ln_density(&self, z: f64) -> f64 {
        ln_beta_density(z, self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Random-walk scale of the drift.
    pub sigma: f64,
    pub n_particles: usize,
    pub m_smooth: usize,
    /// Prior on the weekend multiplier; `None` fixes `z = 1` on every day.
    pub weekend_prior: Option<BetaPrior>,
    /// Prior on the first intensity; `None` derives one from the series.
    pub lambda0_prior: Option<GammaPrior>,
    pub burn_in: usize,
    pub thin: usize,
    pub init_burn_in: usize,
    pub init_thin: usize,
    /// Drift proposal scale; chosen per step from the data when `None`.
    pub proposal_scale: Option<f64>,
    /// Transition draws per particle in the evidence estimate.
    pub evidence_draws: usize,
    pub trunc: TruncationRule,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            n_particles: 2000,
            m_smooth: 2000,
            weekend_prior: Some(BetaPrior { a: 1.0, b: 1.0 }),
            lambda0_prior: None,
            burn_in: 1000,
            thin: 2,
            init_burn_in: 2000,
            init_thin: 5,
            proposal_scale: None,
            evidence_draws: 4,
            trunc: TruncationRule::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n_particles < 100 || self.m_smooth < 100 {
            return Err(Error::InvalidInput("particle counts must be at least 100".into()));
        }
        if self.thin == 0 || self.init_thin == 0 || self.evidence_draws == 0 {
            return Err(Error::InvalidInput("thinning and evidence draws must be positive".into()));
        }
        if let Some(s) = self.proposal_scale {
            if !(s > 0.0) {
                return Err(Error::InvalidInput("proposal scale must be positive".into()));
            }
        }
        if let Some(p) = self.weekend_prior {
            if !(p.a > 0.0 && p.b > 0.0) {
                return Err(Error::InvalidInput("weekend prior parameters must be positive".into()));
            }
        }
        if let Some(p) = self.lambda0_prior {
            if !(p.shape > 0.0 && p.rate > 0.0) {
                return Err(Error::InvalidInput("lambda0 prior parameters must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A series together with the emission density of each day's report.
#[derive(Debug, Clone)]
pub struct Model {
    pub series: Series,
    pub emissions: Vec<Option<ThinnedPoisson>>,
    /// Days on which `z` is free.
    pub weekend: Vec<bool>,
    pub weekend_prior: BetaPrior,
}

impl Model {
    /// Looks up each report's lag in the prior table.
    pub fn new(series: Series, priors: &LagPriorTable, config: &RunConfig) -> Result<Self> {
        let area = series.area_id.clone();
        let mut missing = None;
        let model = Self::with_params(series, config, |lag| match priors.lookup(&area, lag) {
            Some(p) => p.params,
            None => {
                missing.get_or_insert(lag);
                BetaBinomialParams::uniform()
            }
        });
        match missing {
            Some(lag) => Err(Error::InsufficientData(format!(
                "no reporting-rate prior for area {area} at lag {lag}"
            ))),
            None => Ok(model),
        }
    }

    pub fn with_params<F>(series: Series, config: &RunConfig, mut params: F) -> Self
    where
        F: FnMut(u32) -> BetaBinomialParams,
    {
        let emissions = series
            .obs
            .iter()
            .map(|o| {
                o.map(|o| ThinnedPoisson {
                    y: o.count,
                    params: params(o.lag),
                    trunc: config.trunc,
                })
            })
            .collect();
        let weekend = series
            .dates
            .iter()
            .map(|d| config.weekend_prior.is_some() && is_weekend(*d))
            .collect();
        Self {
            series,
            emissions,
            weekend,
            weekend_prior: config.weekend_prior.unwrap_or(BetaPrior { a: 1.0, b: 1.0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// `ln p(y_t | mu)`; zero when day `t` has no report.
    pub fn ln_emission(&self, t: usize, mu: f64) -> f64 {
        match &self.emissions[t] {
            Some(e) => e.ln_likelihood(mu),
            None => 0.0,
        }
    }

    fn z_prior_mean(&self, t: usize) -> f64 {
        if self.weekend[t] {
            self.weekend_prior.mean()
        } else {
            1.0
        }
    }

    fn draw_z<R: Rng>(&self, t: usize, rng: &mut R) -> f64 {
        if self.weekend[t] {
            self.weekend_prior.sample(rng)
        } else {
            1.0
        }
    }

    /// Rough variance of the intensity implied by day `t`'s report alone.
    fn emission_variance(&self, t: usize, lambda: f64) -> f64 {
        match &self.emissions[t] {
            Some(e) => {
                let m = e.params.mean().max(1e-3);
                let z = self.z_prior_mean(t).max(1e-3);
                lambda / (m * z) + lambda * lambda * e.params.variance() / (m * m)
            }
            None => f64::INFINITY,
        }
    }
}

/// Filtering atoms at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub t: usize,
    pub lambda: Vec<f64>,
    pub kappa: Vec<f64>,
    pub z: Vec<f64>,
    /// Index into the previous step's atoms; empty at `t = 0`.
    pub ancestor: Vec<usize>,
    pub acceptance: f64,
}

impl ParticleState {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Mode and spread of a one-dimensional log density evaluated on a grid.
fn grid_mode_and_sd<F: Fn(f64) -> f64>(f: F, hi: f64) -> Option<(f64, f64)> {
    const K: usize = 2000;
    let xs: Vec<f64> = (0..K).map(|k| hi * (k as f64 + 0.5) / K as f64).collect();
    let lp: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
    let (arg, max) = lp
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if *v > acc.1 { (k, *v) } else { acc });
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let m: f64 = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / total;
    let var: f64 = xs.iter().zip(&w).map(|(x, w)| (x - m) * (x - m) * w).sum::<f64>() / total;
    Some((xs[arg], var.sqrt().max(hi / K as f64)))
}

/// Samples `p(lambda_0, z_0 | y_0)` under the Gamma prior and draws the
/// initial drift from `N(0, sigma^2)`.
pub fn filter_init(model: &Model, config: &RunConfig) -> Result<ParticleState> {
    config.validate()?;
    if model.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let n = config.n_particles;
    let mut rng = seeded_rng(config.seed, 0);
    let prior = config
        .lambda0_prior
        .unwrap_or_else(|| model.series.default_lambda0_prior());
    let free_z = model.weekend[0];

    let (lambda, z, acceptance) = match &model.emissions[0] {
        None => {
            let lambda: Vec<f64> = (0..n).map(|_| prior.sample(&mut rng)).collect();
            let z: Vec<f64> = (0..n).map(|_| model.draw_z(0, &mut rng)).collect();
            (lambda, z, 1.0)
        }
        Some(em) => {
            let wp = model.weekend_prior;
            let target = |lambda: f64, z: f64| {
                let lz = if free_z { wp.ln_density(z) } else { 0.0 };
                ln_gamma_density(lambda, prior.shape, prior.rate) + lz + em.ln_likelihood(lambda * z)
            };
            let z0 = model.z_prior_mean(0);
            let guess = em.y as f64 / (em.params.mean().max(1e-3) * z0);
            let prior_sd = prior.shape.sqrt() / prior.rate;
            let hi = (prior.mean() + 20.0 * prior_sd).max(3.0 * guess + 50.0);
            let (mode, sd) = grid_mode_and_sd(|l| target(l, z0), hi).ok_or_else(|| {
                Error::Initialization("first report is infeasible under the intensity prior".into())
            })?;
            let s_lambda = config.proposal_scale.unwrap_or(2.4 * sd);
            let s_z = (2.4 / (mode * em.params.mean().max(1e-3)).max(1.0).sqrt()).clamp(0.02, 0.5);
            let s_ridge = (2.4 * sd / mode.max(1e-9)).clamp(0.005, 0.5);

            let (mut lam, mut zz) = (mode, z0);
            let mut lp = target(lam, zz);
            if !lp.is_finite() {
                return Err(Error::Initialization(format!("log potential at lambda = {lam} is {lp}")));
            }
            let total = config.init_burn_in + n * config.init_thin;
            let mut out_l = Vec::with_capacity(n);
            let mut out_z = Vec::with_capacity(n);
            let mut accepted = 0usize;
            for step in 0..total {
                let (pl, pz) = if free_z {
                    let u: f64 = rng.random();
                    if u < 0.5 {
                        (lam + s_lambda * normal(&mut rng), zz)
                    } else if u < 0.75 {
                        (lam, zz + s_z * normal(&mut rng))
                    } else {
                        let d = s_ridge * normal(&mut rng);
                        (lam * (-d).exp(), zz * d.exp())
                    }
                } else {
                    (lam + s_lambda * normal(&mut rng), zz)
                };
                if pl > 0.0 && pz > 0.0 && pz <= 1.0 {
                    let plp = target(pl, pz);
                    // The ridge move is symmetric in (ln lambda, ln z) and keeps
                    // lambda * z fixed, so its Jacobian terms cancel.
                    if plp > f64::NEG_INFINITY && rng.random::<f64>().ln() < plp - lp {
                        lam = pl;
                        zz = pz;
                        lp = plp;
                        accepted += 1;
                    }
                }
                if step >= config.init_burn_in && (step - config.init_burn_in + 1).is_multiple_of(config.init_thin) {
                    out_l.push(lam);
                    out_z.push(zz);
                }
            }
            (out_l, out_z, accepted as f64 / total as f64)
        }
    };
    let kappa = (0..n).map(|_| config.sigma * normal(&mut rng)).collect();
    Ok(ParticleState {
        t: 0,
        lambda,
        kappa,
        z,
        ancestor: Vec::new(),
        acceptance,
    })
}

fn auto_kappa_scale(prev: &ParticleState, model: &Model, t: usize, config: &RunConfig) -> f64 {
    if let Some(s) = config.proposal_scale {
        return s;
    }
    let pred: Vec<f64> = prev
        .lambda
        .iter()
        .zip(&prev.kappa)
        .map(|(l, k)| l + k)
        .collect();
    let lam = mean(&pred).max(1.0);
    let v_em = model.emission_variance(t, lam);
    2.4 / (1.0 / (config.sigma * config.sigma) + 1.0 / v_em).sqrt()
}

/// Samples the filtering distribution at `t` from the atoms at `t - 1`.
pub fn filter_step(prev: &ParticleState, model: &Model, t: usize, config: &RunConfig) -> Result<ParticleState> {
    let n = config.n_particles;
    let np = prev.len();
    let sigma = config.sigma;
    let mut rng = seeded_rng(config.seed, t as u64);
    let free_z = model.weekend[t];

    let Some(em) = &model.emissions[t] else {
        return predict_step(prev, model, t, config, &mut rng);
    };

    let wp = model.weekend_prior;
    let ln_drift = |i: usize, kappa: f64| ln_normal_density(kappa, prev.kappa[i], sigma);
    let ln_z = |z: f64| if free_z { wp.ln_density(z) } else { 0.0 };

    // Start from the ancestor whose mean transition best explains y_t.
    let z0 = model.z_prior_mean(t);
    let mut start = None;
    let mut best = f64::NEG_INFINITY;
    for i in 0..np {
        let lam = prev.lambda[i] + prev.kappa[i];
        if lam <= 0.0 {
            continue;
        }
        let v = em.ln_likelihood(lam * z0);
        if v > best {
            best = v;
            start = Some(i);
        }
    }
    let theta = em.params.mean().max(1e-3);
    // Every mean transition is non-positive: start from the atom closest to
    // zero with the drift stretched to a positive intensity near y / theta.
    let (i0, lam_start) = match start {
        Some(i) => (i, prev.lambda[i] + prev.kappa[i]),
        None => {
            let i = (0..np)
                .max_by(|a, b| (prev.lambda[*a] + prev.kappa[*a]).total_cmp(&(prev.lambda[*b] + prev.kappa[*b])))
                .ok_or_else(|| Error::Degenerate {
                    step: t,
                    reason: "no previous atoms".into(),
                })?;
            warn!("step {t}: every mean transition is non-positive; restarting near the report");
            (i, (em.y as f64 / (theta * z0)).max(0.5))
        }
    };
    if !em.ln_likelihood(lam_start * z0).is_finite() {
        return Err(Error::Degenerate {
            step: t,
            reason: "no previous atom yields a positive, feasible intensity".into(),
        });
    }

    let s_k = auto_kappa_scale(prev, model, t, config);
    let lam_bar = lam_start.max(1.0);
    let s_z = (2.4 / (lam_bar * theta * z0).max(1.0).sqrt()).clamp(0.02, 0.5);
    let s_ridge = (2.4 * sigma / lam_bar).clamp(0.005, 0.5);

    let mut i = i0;
    let mut kappa = lam_start - prev.lambda[i0];
    let mut lam = lam_start;
    let mut z = z0;
    let mut ld = ln_drift(i, kappa);
    let mut le = em.ln_likelihood(lam * z);
    let mut lz = ln_z(z);

    let total = config.burn_in + n * config.thin;
    let mut out = ParticleState {
        t,
        lambda: Vec::with_capacity(n),
        kappa: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        ancestor: Vec::with_capacity(n),
        acceptance: 0.0,
    };
    let mut accepted = 0usize;
    for step in 0..total {
        let u: f64 = rng.random();
        let n_moves = if free_z { 5.0 } else { 3.0 };
        let mv = (u * n_moves) as u32;
        match mv {
            // Independent draw from the transition mixture; the prior terms
            // cancel against the proposal, leaving the emission ratio.
            2 if !free_z => {
                let pi = rng.random_range(0..np);
                let pk = prev.kappa[pi] + sigma * normal(&mut rng);
                let pl = prev.lambda[pi] + pk;
                if pl > 0.0 {
                    let pe = em.ln_likelihood(pl * z);
                    if rng.random::<f64>().ln() < pe - le {
                        i = pi;
                        kappa = pk;
                        lam = pl;
                        ld = ln_drift(pi, pk);
                        le = pe;
                        accepted += 1;
                    }
                }
            }
            4 => {
                let pi = rng.random_range(0..np);
                let pk = prev.kappa[pi] + sigma * normal(&mut rng);
                let pl = prev.lambda[pi] + pk;
                let pz = wp.sample(&mut rng);
                if pl > 0.0 {
                    let pe = em.ln_likelihood(pl * pz);
                    if rng.random::<f64>().ln() < pe - le {
                        i = pi;
                        kappa = pk;
                        lam = pl;
                        z = pz;
                        ld = ln_drift(pi, pk);
                        lz = ln_z(pz);
                        le = pe;
                        accepted += 1;
                    }
                }
            }
            // Drift step with the ancestor held: moves lambda.
            0 => {
                let pk = kappa + s_k * normal(&mut rng);
                let pl = prev.lambda[i] + pk;
                if pl > 0.0 {
                    let pd = ln_drift(i, pk);
                    let pe = em.ln_likelihood(pl * z);
                    if rng.random::<f64>().ln() < pd + pe - ld - le {
                        kappa = pk;
                        lam = pl;
                        ld = pd;
                        le = pe;
                        accepted += 1;
                    }
                }
            }
            // Uniform new ancestor with the drift shifted so lambda is unchanged.
            1 => {
                let pi = rng.random_range(0..np);
                let pk = lam - prev.lambda[pi];
                let pd = ln_drift(pi, pk);
                if rng.random::<f64>().ln() < pd - ld {
                    i = pi;
                    kappa = pk;
                    ld = pd;
                    accepted += 1;
                }
            }
            2 => {
                let pz = z + s_z * normal(&mut rng);
                if pz > 0.0 && pz <= 1.0 {
                    let pe = em.ln_likelihood(lam * pz);
                    let pzl = ln_z(pz);
                    if rng.random::<f64>().ln() < pe + pzl - le - lz {
                        z = pz;
                        le = pe;
                        lz = pzl;
                        accepted += 1;
                    }
                }
            }
            // Trade lambda against z along lambda * z = const.
            3 => {
                let d = s_ridge * normal(&mut rng);
                let pl = lam * (-d).exp();
                let pz = z * d.exp();
                if pz <= 1.0 {
                    let pk = pl - prev.lambda[i];
                    let pd = ln_drift(i, pk);
                    let pzl = ln_z(pz);
                    if rng.random::<f64>().ln() < pd + pzl - ld - lz {
                        kappa = pk;
                        lam = pl;
                        z = pz;
                        ld = pd;
                        lz = pzl;
                        accepted += 1;
                    }
                }
            }
            _ => unreachable!(),
        }
        if step >= config.burn_in && (step - config.burn_in + 1).is_multiple_of(config.thin) {
            out.lambda.push(lam);
            out.kappa.push(kappa);
            out.z.push(z);
            out.ancestor.push(i);
        }
    }
    out.acceptance = accepted as f64 / total as f64;
    Ok(out)
}

/// Exact draws from the transition when day `t` has no report.
fn predict_step(
    prev: &ParticleState,
    model: &Model,
    t: usize,
    config: &RunConfig,
    rng: &mut SmcRng,
) -> Result<ParticleState> {
    let n = config.n_particles;
    let mut out = ParticleState {
        t,
        lambda: Vec::with_capacity(n),
        kappa: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        ancestor: Vec::with_capacity(n),
        acceptance: 1.0,
    };
    for _ in 0..n {
        let (i, kappa, lam) = draw_transition(prev, config.sigma, rng).ok_or_else(|| Error::Degenerate {
            step: t,
            reason: "transition keeps proposing non-positive intensities".into(),
        })?;
        out.lambda.push(lam);
        out.kappa.push(kappa);
        out.z.push(model.draw_z(t, rng));
        out.ancestor.push(i);
    }
    Ok(out)
}

/// A uniformly chosen atom pushed through the random walk, conditioned on a
/// positive intensity.
fn draw_transition<R: Rng>(prev: &ParticleState, sigma: f64, rng: &mut R) -> Option<(usize, f64, f64)> {
    for _ in 0..MAX_PRIOR_TRIES {
        let i = rng.random_range(0..prev.len());
        let kappa = prev.kappa[i] + sigma * normal(rng);
        let lam = prev.lambda[i] + kappa;
        if lam > 0.0 {
            return Some((i, kappa, lam));
        }
    }
    None
}

pub fn forward_filter(model: &Model, config: &RunConfig) -> Result<Vec<ParticleState>> {
    let mut states = Vec::with_capacity(model.len());
    states.push(filter_init(model, config)?);
    for t in 1..model.len() {
        let next = filter_step(&states[t - 1], model, t, config)?;
        states.push(next);
    }
    Ok(states)
}

/// Smoothing atoms per day. `source[t][j]` is the filtering index of atom `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingResult {
    pub area_id: String,
    pub dates: Vec<NaiveDate>,
    pub lambda: Vec<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub source: Vec<Vec<usize>>,
    /// Steps at which ancestry was unusable and the filtering atoms were kept.
    pub fallback_steps: Vec<usize>,
}

impl SmoothingResult {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// Backward pass: at `T` the smoothing atoms are the filtering atoms; earlier
/// atoms are resampled in proportion to how many later smoothing atoms
/// descend from them.
pub fn backward_smooth(states: &[ParticleState], series: &Series, config: &RunConfig) -> Result<SmoothingResult> {
    let Some(last) = states.last() else {
        return Err(Error::InsufficientData("no filtering states".into()));
    };
    let m = config.m_smooth;
    let mut rng = seeded_rng(config.seed, SMOOTH_STREAM);
    let n_last = last.len();
    let mut idx: Vec<usize> = if m == n_last {
        (0..m).collect()
    } else {
        (0..m).map(|_| rng.random_range(0..n_last)).collect()
    };
    let mut sources = vec![Vec::new(); states.len()];
    let mut fallback_steps = Vec::new();
    sources[states.len() - 1] = idx.clone();
    for t in (0..states.len() - 1).rev() {
        let child = &states[t + 1];
        let n_t = states[t].len();
        let usable = child.ancestor.len() == child.len() && idx.iter().all(|j| child.ancestor[*j] < n_t);
        idx = if usable {
            // Drawing a later atom uniformly and taking its ancestor is the
            // multinomial draw with weights proportional to descendant counts.
            (0..m)
                .map(|_| child.ancestor[idx[rng.random_range(0..m)]])
                .collect()
        } else {
            warn!("smoothing weights vanished at step {t}; keeping filtering atoms");
            fallback_steps.push(t);
            (0..m).map(|_| rng.random_range(0..n_t)).collect()
        };
        sources[t] = idx.clone();
    }
    fallback_steps.reverse();
    let pick = |v: &Vec<f64>, s: &Vec<usize>| s.iter().map(|k| v[*k]).collect::<Vec<f64>>();
    Ok(SmoothingResult {
        area_id: series.area_id.clone(),
        dates: series.dates[..states.len()].to_vec(),
        lambda: states.iter().zip(&sources).map(|(s, k)| pick(&s.lambda, k)).collect(),
        kappa: states.iter().zip(&sources).map(|(s, k)| pick(&s.kappa, k)).collect(),
        z: states.iter().zip(&sources).map(|(s, k)| pick(&s.z, k)).collect(),
        source: sources,
        fallback_steps,
    })
}

/// Sorted distinct values with their multiplicities.
fn distinct_weighted(values: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for x in v {
        match out.last_mut() {
            Some((last, w)) if *last == x => *w += 1.0,
            _ => out.push((x, 1.0)),
        }
    }
    out
}

/// Mixture of Poisson pmfs with the given weighted means.
fn poisson_mixture(mus: &[(f64, f64)], trunc: &TruncationRule) -> Result<CountPmf> {
    let hi = mus.iter().map(|(mu, _)| trunc.upper(*mu)).max().unwrap_or(0);
    let lnfact: Vec<f64> = (0..=hi).map(ln_factorial).collect();
    let mut acc = vec![0.0; hi as usize + 1];
    for (mu, w) in mus {
        if *mu <= 0.0 {
            acc[0] += w;
            continue;
        }
        let lmu = mu.ln();
        for (x, a) in acc.iter_mut().enumerate() {
            *a += w * (x as f64 * lmu - mu - lnfact[x]).exp();
        }
    }
    CountPmf::from_weights(0, acc)
}

/// `p(x_t | y_0:T)` for one day from its smoothing atoms.
pub fn smooth_count(lambda: &[f64], z: &[f64], emission: Option<&ThinnedPoisson>, trunc: &TruncationRule) -> Result<CountPmf> {
    let mus = distinct_weighted(lambda.iter().zip(z).map(|(l, z)| l * z));
    let Some(em) = emission else {
        return poisson_mixture(&mus, trunc);
    };
    let y = em.y;
    let hi = mus.iter().map(|(mu, _)| trunc.x_max(*mu, y)).max().unwrap_or(y);
    let lnfact: Vec<f64> = (0..=hi).map(ln_factorial).collect();
    let ln_bb: Vec<f64> = (y..=hi).map(|x| ln_beta_binomial_pmf(y, x, &em.params)).collect();
    let mut acc = vec![0.0; (hi - y + 1) as usize];
    for (mu, w) in &mus {
        let ln_py = em.ln_likelihood(*mu);
        if !ln_py.is_finite() {
            continue;
        }
        let lmu = mu.ln();
        for (k, a) in acc.iter_mut().enumerate() {
            let x = y as usize + k;
            // Each summand is p(x | mu, y), a proper pmf, so it never overflows.
            let v = x as f64 * lmu - mu - lnfact[x] + ln_bb[k] - ln_py;
            if v > -745.0 {
                *a += w * v.exp();
            }
        }
    }
    CountPmf::from_weights(y, acc)
}

/// Count posteriors for every day of a smoothing result.
pub fn smooth_counts(smoothing: &SmoothingResult, model: &Model, config: &RunConfig) -> Result<Vec<CountPmf>> {
    let days: Vec<usize> = (0..smoothing.len()).collect();
    par::map(&days, |t| {
        smooth_count(
            &smoothing.lambda[*t],
            &smoothing.z[*t],
            model.emissions[*t].as_ref(),
            &config.trunc,
        )
    })
    .into_iter()
    .collect()
}

/// Posterior over the weekend multiplier on a fixed grid of `z` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPosterior {
    pub grid: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ZPosterior {
    pub fn point(z: f64) -> Self {
        Self {
            grid: vec![z],
            probs: vec![1.0],
        }
    }

    pub fn mean(&self) -> f64 {
        self.grid.iter().zip(&self.probs).map(|(z, p)| z * p).sum()
    }
}

/// `ln p(y | mu)` tabulated on a log-spaced grid and linearly interpolated.
struct EmissionTable<'a> {
    em: &'a ThinnedPoisson,
    ln_lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl<'a> EmissionTable<'a> {
    fn new(em: &'a ThinnedPoisson, lo: f64, hi: f64) -> Self {
        const K: usize = 4000;
        let ln_lo = lo.ln();
        let step = ((hi.ln() - ln_lo) / (K - 1) as f64).max(1e-12);
        let values = (0..K)
            .map(|k| em.ln_likelihood((ln_lo + k as f64 * step).exp()))
            .collect();
        Self {
            em,
            ln_lo,
            step,
            values,
        }
    }

    fn eval(&self, mu: f64) -> f64 {
        let pos = (mu.ln() - self.ln_lo) / self.step;
        if pos < 0.0 || pos >= (self.values.len() - 1) as f64 {
            return self.em.ln_likelihood(mu);
        }
        let k = pos as usize;
        let f = pos - k as f64;
        let (a, b) = (self.values[k], self.values[k + 1]);
        if !a.is_finite() || !b.is_finite() {
            return self.em.ln_likelihood(mu);
        }
        a + (b - a) * f
    }
}

/// `p(z_t | y_0:T) = mean_j p(y_t | L_j z) Beta(z; a, b) / p(y_t | L_j)` on
/// a grid. Weekdays give a point mass at 1.
pub fn weekend_posterior(smoothing: &SmoothingResult, model: &Model, t: usize) -> ZPosterior {
    if !model.weekend[t] {
        return ZPosterior::point(1.0);
    }
    let grid: Vec<f64> = (0..Z_GRID).map(|k| (k as f64 + 0.5) / Z_GRID as f64).collect();
    let ln_prior: Vec<f64> = grid.iter().map(|z| model.weekend_prior.ln_density(*z)).collect();
    let lambdas = distinct_weighted(smoothing.lambda[t].iter().copied());
    let mut probs = vec![0.0; Z_GRID];
    let table = model.emissions[t].as_ref().map(|em| {
        let lo = lambdas.first().map(|l| l.0).unwrap_or(1.0) * grid[0];
        let hi = lambdas.last().map(|l| l.0).unwrap_or(1.0);
        EmissionTable::new(em, lo.max(1e-12), hi.max(lo * 1.0001).max(1e-12))
    });
    let mut post = vec![0.0; Z_GRID];
    for (lam, w) in &lambdas {
        for (k, z) in grid.iter().enumerate() {
            post[k] = ln_prior[k] + table.as_ref().map_or(0.0, |tb| tb.eval(lam * z));
        }
        let max = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            continue;
        }
        let total: f64 = post.iter().map(|v| (v - max).exp()).sum();
        for (p, v) in probs.iter_mut().zip(&post) {
            *p += w * (v - max).exp() / total;
        }
    }
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    ZPosterior { grid, probs }
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Per-day terms of the log evidence: `ln p(y_0)` followed by the one-step
/// conditional evidences `ln p(y_t | y_0:t-1)`. Days without a report give 0.
pub fn evidence_terms(states: &[ParticleState], model: &Model, config: &RunConfig) -> Vec<f64> {
    let days: Vec<usize> = (0..states.len()).collect();
    par::map(&days, |t| evidence_term(states, model, config, *t))
}

fn evidence_term(states: &[ParticleState], model: &Model, config: &RunConfig, t: usize) -> f64 {
    if model.emissions[t].is_none() {
        return 0.0;
    }
    let mut rng = seeded_rng(config.seed, EVIDENCE_STREAM + t as u64);
    let draws = config.n_particles * config.evidence_draws;
    let mut vals = Vec::with_capacity(draws);
    if t == 0 {
        let prior = config
            .lambda0_prior
            .unwrap_or_else(|| model.series.default_lambda0_prior());
        for _ in 0..draws {
            let lam = prior.sample(&mut rng);
            let z = model.draw_z(0, &mut rng);
            vals.push(model.ln_emission(0, lam * z));
        }
    } else {
        let prev = &states[t - 1];
        for i in 0..prev.len() {
            for _ in 0..config.evidence_draws {
                let lam = prev.lambda[i] + prev.kappa[i] + config.sigma * normal(&mut rng);
                let z = model.draw_z(t, &mut rng);
                vals.push(if lam > 0.0 {
                    model.ln_emission(t, lam * z)
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
    }
    log_mean_exp(&vals)
}

pub fn log_evidence(states: &[ParticleState], model: &Model, config: &RunConfig) -> f64 {
    evidence_terms(states, model, config).iter().sum()
}

/// One-step-ahead count predictive `p(x_{t+1} | y_0:t)` from the filtering
/// atoms at `t`, pushed through the transition and the Poisson emission.
pub fn predictive_counts(state: &ParticleState, model: &Model, config: &RunConfig) -> Result<CountPmf> {
    let t_next = state.t + 1;
    let mut rng = seeded_rng(config.seed, PREDICT_STREAM + t_next as u64);
    let weekend = model.weekend.get(t_next).copied().unwrap_or(false);
    let mut mus = Vec::with_capacity(state.len());
    for _ in 0..state.len() {
        let (_, _, lam) = draw_transition(state, config.sigma, &mut rng).ok_or_else(|| Error::Degenerate {
            step: t_next,
            reason: "transition keeps proposing non-positive intensities".into(),
        })?;
        let z = if weekend {
            model.weekend_prior.sample(&mut rng)
        } else {
            1.0
        };
        mus.push(lam * z);
    }
    poisson_mixture(&distinct_weighted(mus.into_iter()), &config.trunc)
}

/// Everything produced by one filtering and smoothing run.
#[derive(Debug, Clone)]
pub struct SmcOutput {
    pub states: Vec<ParticleState>,
    pub smoothing: SmoothingResult,
    pub counts: Vec<CountPmf>,
    pub evidence_terms: Vec<f64>,
}

impl SmcOutput {
    pub fn log_evidence(&self) -> f64 {
        self.evidence_terms.iter().sum()
    }

    pub fn summaries(&self, model: &Model) -> Vec<DaySummary> {
        (0..self.smoothing.len())
            .map(|t| {
                let lambda = AtomSummary::of(&self.smoothing.lambda[t]);
                let c = &self.counts[t];
                DaySummary {
                    date: self.smoothing.dates[t],
                    lambda_mean: lambda.mean,
                    lambda_q05: lambda.q05,
                    lambda_q95: lambda.q95,
                    kappa_mean: mean(&self.smoothing.kappa[t]),
                    x_mean: c.mean(),
                    x_q05: c.quantile(0.05),
                    x_q95: c.quantile(0.95),
                    z_mean: weekend_posterior(&self.smoothing, model, t).mean(),
                }
            })
            .collect()
    }
}

/// Filter, evidence, smooth and count-smooth in one call.
pub fn run(model: &Model, config: &RunConfig) -> Result<SmcOutput> {
    let states = forward_filter(model, config)?;
    let evidence_terms = evidence_terms(&states, model, config);
    let smoothing = backward_smooth(&states, &model.series, config)?;
    let counts = smooth_counts(&smoothing, model, config)?;
    Ok(SmcOutput {
        states,
        smoothing,
        counts,
        evidence_terms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaySummary {
    pub date: NaiveDate,
    pub lambda_mean: f64,
    pub lambda_q05: f64,
    pub lambda_q95: f64,
    pub kappa_mean: f64,
    pub x_mean: f64,
    pub x_q05: u64,
    pub x_q95: u64,
    pub z_mean: f64,
}

pub const SUMMARY_HEADER: [&str; 4] = ["area_id", "test_date", "stat", "value"];

pub fn write_summary_csv<W: Write>(areas: &[(&str, &[DaySummary])], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SUMMARY_HEADER)?;
    for (area, days) in areas {
        for d in *days {
            let date = d.date.to_string();
            let stats: [(&str, f64); 8] = [
                ("lambda_mean", d.lambda_mean),
                ("lambda_q05", d.lambda_q05),
                ("lambda_q95", d.lambda_q95),
                ("kappa_mean", d.kappa_mean),
                ("x_mean", d.x_mean),
                ("x_q05", d.x_q05 as f64),
                ("x_q95", d.x_q95 as f64),
                ("z_mean", d.z_mean),
            ];
            for (name, v) in stats {
                wtr.write_record([*area, date.as_str(), name, &format!("{v}")])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Count posteriors keyed by test date.
pub fn count_posteriors_json(dates: &[NaiveDate], counts: &[CountPmf]) -> serde_json::Value {
    let map: BTreeMap<String, &CountPmf> = dates.iter().map(|d| d.to_string()).zip(counts).collect();
    serde_json::to_value(map).expect("count posteriors serialize")
}
