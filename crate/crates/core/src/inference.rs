//! Probability kernels for thinned counts and a random-walk Metropolis-Hastings
//! sampler shared by the time-independent posteriors and the particle filter.
//!
//! Every density is evaluated in log space. The Poisson/beta-binomial emission
//! sum is evaluated by walking outwards from its mode with term ratios, so a
//! single evaluation costs a handful of multiplications per retained term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dist::CountPmf;
use crate::error::{Error, Result};

pub type SmcRng = ChaCha8Rng;

/// Deterministic generator for one `(seed, stream)` pair. Streams let
/// independent parts of a run draw reproducibly regardless of call order.
pub fn seeded_rng(seed: u64, stream: u64) -> SmcRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn ln_poisson_pmf(x: u64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if x == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    x as f64 * mu.ln() - mu - ln_factorial(x)
}

pub fn ln_binomial_pmf(y: u64, x: u64, p: f64) -> f64 {
    if y > x {
        return f64::NEG_INFINITY;
    }
    let k = y as f64;
    let n = x as f64;
    let a = if y == 0 { 0.0 } else { k * p.ln() };
    let b = if y == x { 0.0 } else { (n - k) * (1.0 - p).ln() };
    ln_choose(x, y) + a + b
}

/// Parameters of the beta prior on a reporting rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaBinomialParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaBinomialParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Flat Beta(1, 1).
    pub fn uniform() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Likelihood of a cumulative report `y` given the true count `x`.
pub trait Thinning {
    fn ln_pmf(&self, y: u64, x: u64) -> f64;
}

impl Thinning for BetaBinomialParams {
    fn ln_pmf(&self, y: u64, x: u64) -> f64 {
        ln_beta_binomial_pmf(y, x, self)
    }
}

/// Binomial thinning with a known reporting rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedRate(pub f64);

impl Thinning for FixedRate {
    fn ln_pmf(&self, y: u64, x: u64) -> f64 {
        ln_binomial_pmf(y, x, self.0)
    }
}

pub fn ln_beta_binomial_pmf(y: u64, x: u64, params: &BetaBinomialParams) -> f64 {
    if y > x {
        return f64::NEG_INFINITY;
    }
    let (a, b) = (params.alpha, params.beta);
    ln_choose(x, y) + ln_beta(y as f64 + a, (x - y) as f64 + b) - ln_beta(a, b)
}

/// `C(x,y) B(y+a, x-y+b) / B(a,b)`; zero when `y > x`.
pub fn beta_binomial_pmf(y: u64, x: u64, params: &BetaBinomialParams) -> f64 {
    ln_beta_binomial_pmf(y, x, params).exp()
}

/// Prior over true counts on a finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPrior {
    lo: u64,
    hi: u64,
    /// `None` means flat.
    weights: Option<Vec<f64>>,
}

impl CountPrior {
    pub fn flat(lo: u64, hi: u64) -> Result<Self> {
        if hi < lo {
            return Err(Error::Domain(format!("empty count support [{lo}, {hi}]")));
        }
        Ok(Self {
            lo,
            hi,
            weights: None,
        })
    }

    pub fn weighted(lo: u64, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("empty count support".into()));
        }
        let pmf = CountPmf::from_weights(lo, weights)?;
        Ok(Self {
            lo,
            hi: pmf.end() - 1,
            weights: Some(pmf.probs().to_vec()),
        })
    }

    pub fn lo(&self) -> u64 {
        self.lo
    }

    pub fn hi(&self) -> u64 {
        self.hi
    }

    pub fn ln_prob(&self, x: u64) -> f64 {
        if x < self.lo || x > self.hi {
            return f64::NEG_INFINITY;
        }
        match &self.weights {
            None => -((self.hi - self.lo + 1) as f64).ln(),
            Some(w) => w[(x - self.lo) as usize].ln(),
        }
    }
}

/// Exact posterior over the true count given the latest cumulative report.
pub fn posterior_x_given_y<T: Thinning>(y: u64, thinning: &T, prior: &CountPrior) -> Result<CountPmf> {
    if y > prior.hi() {
        return Err(Error::InfeasibleObservation(format!(
            "report {y} exceeds the prior support maximum {}",
            prior.hi()
        )));
    }
    let lo = prior.lo().max(y);
    let log_w: Vec<f64> = (lo..=prior.hi())
        .map(|x| prior.ln_prob(x) + thinning.ln_pmf(y, x))
        .collect();
    CountPmf::from_log_weights(lo, &log_w).map_err(|_| {
        Error::InfeasibleObservation(format!("report {y} has zero mass under the prior"))
    })
}

/// Posterior over the true count sampled with Metropolis-Hastings over the
/// integers (rounded normal proposals, which are symmetric).
pub fn posterior_x_given_y_mh<T: Thinning>(
    y: u64,
    thinning: &T,
    prior: &CountPrior,
    config: &MhConfig,
) -> Result<CountPmf> {
    let log_target = |x: i64| {
        if x < 0 {
            f64::NEG_INFINITY
        } else {
            prior.ln_prob(x as u64) + thinning.ln_pmf(y, x as u64)
        }
    };
    let init = prior.lo().max(y) as i64;
    let draws = mh_sample_counts(log_target, init, config)?;
    let draws: Vec<u64> = draws.into_iter().map(|x| x as u64).collect();
    CountPmf::from_samples(&draws)
}

/// Upper limit of the Poisson sum: `max(y, ceil(lambda + k sqrt(lambda)) + offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationRule {
    pub tail_sds: f64,
    pub offset: u64,
}

impl Default for TruncationRule {
    fn default() -> Self {
        Self {
            tail_sds: 10.0,
            offset: 50,
        }
    }
}

impl TruncationRule {
    pub fn upper(&self, mu: f64) -> u64 {
        let mu = mu.max(0.0);
        (mu + self.tail_sds * mu.sqrt()).ceil() as u64 + self.offset
    }

    pub fn x_max(&self, mu: f64, y: u64) -> u64 {
        self.upper(mu).max(y)
    }
}

/// Emission density of a latest report `y` given a Poisson intensity,
/// with the true count and the reporting rate marginalized out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThinnedPoisson {
    pub y: u64,
    pub params: BetaBinomialParams,
    pub trunc: TruncationRule,
}

/// Relative size below which tail terms of the emission sum are dropped.
const TAIL_EPS: f64 = 1e-18;

impl ThinnedPoisson {
    pub fn new(y: u64, params: BetaBinomialParams) -> Self {
        Self {
            y,
            params,
            trunc: TruncationRule::default(),
        }
    }

    /// `term(x+1) / term(x)` for `term(x) = Poisson(x; mu) BB(y | x)`.
    #[inline]
    fn ratio(&self, x: u64, mu: f64) -> f64 {
        let u = (x - self.y) as f64;
        let (a, b) = (self.params.alpha, self.params.beta);
        mu * (u + b) / ((u + 1.0) * (x as f64 + a + b))
    }

    /// Larger root (in `u = x - y`) of `ratio = 1`, i.e. the mode of the
    /// summand, and whether a second, smaller root lies above zero.
    fn mode_offset(&self, mu: f64) -> (f64, bool) {
        let (a, b) = (self.params.alpha, self.params.beta);
        let c = self.y as f64 + a + b;
        // u^2 + u (1 + c - mu) + (c - mu b) = 0
        let lin = 1.0 + c - mu;
        let cst = c - mu * b;
        let disc = lin * lin - 4.0 * cst;
        if disc < 0.0 {
            return (0.0, false);
        }
        let sq = disc.sqrt();
        let hi = 0.5 * (-lin + sq);
        let lo = 0.5 * (-lin - sq);
        (hi.max(0.0), lo > 0.0)
    }

    pub fn ln_likelihood(&self, mu: f64) -> f64 {
        if !(mu > 0.0) {
            return if self.y == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        let y = self.y;
        let x_max = self.trunc.x_max(mu, y);
        let (u_star, two_roots) = self.mode_offset(mu);
        let x0 = (y + u_star.floor() as u64).min(x_max);
        let ln_anchor = ln_poisson_pmf(x0, mu) + ln_beta_binomial_pmf(y, x0, &self.params);
        if ln_anchor == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }

        let mut sum = 1.0;
        let mut term = 1.0;
        let mut x = x0;
        while x < x_max {
            let r = self.ratio(x, mu);
            term *= r;
            sum += term;
            x += 1;
            if r < 1.0 && term < TAIL_EPS * sum {
                break;
            }
        }
        term = 1.0;
        x = x0;
        while x > y {
            x -= 1;
            let r = self.ratio(x, mu);
            term /= r;
            sum += term;
            if !two_roots && r > 1.0 && term < TAIL_EPS * sum {
                break;
            }
        }
        ln_anchor + sum.ln()
    }

    pub fn likelihood(&self, mu: f64) -> f64 {
        self.ln_likelihood(mu).exp()
    }
}

/// `p(y | lambda) = sum_x Poisson(x; lambda) BB(y | x)` truncated by `trunc`.
pub fn poisson_bb_likelihood(
    lambda: f64,
    y: u64,
    params: &BetaBinomialParams,
    trunc: TruncationRule,
) -> f64 {
    ThinnedPoisson {
        y,
        params: *params,
        trunc,
    }
    .likelihood(lambda)
}

/// Settings for a single random-walk Metropolis-Hastings chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_scale: f64,
    pub seed: u64,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            burn_in: 2_000,
            thin: 5,
            proposal_scale: 1.0,
            seed: 0,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps <= self.burn_in {
            return Err(Error::InvalidInput(format!(
                "MH steps ({}) must exceed burn-in ({})",
                self.steps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("MH thinning must be at least 1".into()));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(Error::InvalidInput("MH proposal scale must be positive".into()));
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        (self.steps - self.burn_in) / self.thin
    }
}

/// Generic Metropolis-Hastings loop for symmetric proposals. Runs
/// `burn_in + n_atoms * thin` transitions and keeps every `thin`-th state
/// after burn-in. The log target of the current state is cached.
pub fn metropolis<S, R, F, P>(
    rng: &mut R,
    init: S,
    mut log_target: F,
    mut propose: P,
    burn_in: usize,
    thin: usize,
    n_atoms: usize,
) -> Result<(Vec<S>, f64)>
where
    S: Clone,
    R: Rng + ?Sized,
    F: FnMut(&S) -> f64,
    P: FnMut(&S, &mut R) -> S,
{
    let mut current = init;
    let mut current_lp = log_target(&current);
    if !current_lp.is_finite() {
        return Err(Error::Initialization(format!(
            "log potential at the initial state is {current_lp}"
        )));
    }
    let total = burn_in + n_atoms * thin;
    let mut atoms = Vec::with_capacity(n_atoms);
    let mut accepted = 0usize;
    for step in 0..total {
        let proposal = propose(&current, rng);
        let lp = log_target(&proposal);
        if lp > f64::NEG_INFINITY {
            let log_u: f64 = rng.random::<f64>().ln();
            if log_u < lp - current_lp {
                current = proposal;
                current_lp = lp;
                accepted += 1;
            }
        }
        if step >= burn_in && (step - burn_in + 1).is_multiple_of(thin) {
            atoms.push(current.clone());
        }
    }
    Ok((atoms, accepted as f64 / total.max(1) as f64))
}

/// Random-walk MH over the real line with normal proposals.
pub fn mh_sample<F: Fn(f64) -> f64>(log_potential: F, init: f64, config: &MhConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, 0);
    let scale = config.proposal_scale;
    let (atoms, _) = metropolis(
        &mut rng,
        init,
        |x: &f64| log_potential(*x),
        |x: &f64, rng: &mut SmcRng| {
            let e: f64 = StandardNormal.sample(rng);
            x + scale * e
        },
        config.burn_in,
        config.thin,
        config.n_atoms(),
    )?;
    Ok(atoms)
}

/// Random-walk MH over the integers with rounded normal proposals.
pub fn mh_sample_counts<F: Fn(i64) -> f64>(log_potential: F, init: i64, config: &MhConfig) -> Result<Vec<i64>> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, 0);
    let scale = config.proposal_scale;
    let (atoms, _) = metropolis(
        &mut rng,
        init,
        |x: &i64| log_potential(*x),
        |x: &i64, rng: &mut SmcRng| {
            let e: f64 = StandardNormal.sample(rng);
            x + (scale * e).round() as i64
        },
        config.burn_in,
        config.thin,
        config.n_atoms(),
    )?;
    Ok(atoms)
}

/// Unnormalized log density of Gamma(shape, rate) at `x > 0`.
pub fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn ln_beta_density(z: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&z) {
        return f64::NEG_INFINITY;
    }
    let lz = if a == 1.0 { 0.0 } else { (a - 1.0) * z.ln() };
    let l1z = if b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - z).ln() };
    lz + l1z - ln_beta(a, b)
}

pub fn ln_normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    let d = (x - mean) / sd;
    -0.5 * d * d - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bb(a: f64, b: f64) -> BetaBinomialParams {
        BetaBinomialParams::new(a, b).unwrap()
    }

    #[test]
    fn uniform_prior_gives_uniform_beta_binomial() {
        for y in 0..=3 {
            assert_relative_eq!(beta_binomial_pmf(y, 3, &bb(1.0, 1.0)), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_binomial_single_trial() {
        // B(3,2) / B(2,2) = (1/12) / (1/6)
        assert_relative_eq!(beta_binomial_pmf(1, 1, &bb(2.0, 2.0)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn beta_binomial_edge_cases() {
        assert_relative_eq!(beta_binomial_pmf(0, 0, &bb(0.3, 7.0)), 1.0, epsilon = 1e-12);
        assert_eq!(beta_binomial_pmf(4, 3, &bb(1.0, 1.0)), 0.0);
    }

    #[test]
    fn rejects_nonpositive_beta_params() {
        assert!(BetaBinomialParams::new(0.0, 1.0).is_err());
        assert!(BetaBinomialParams::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn posterior_with_point_support() {
        let prior = CountPrior::flat(7, 7).unwrap();
        let post = posterior_x_given_y(7, &bb(2.0, 3.0), &prior).unwrap();
        assert_eq!(post, CountPmf::point_mass(7));
    }

    #[test]
    fn posterior_flat_prior_closed_form() {
        // With theta ~ U(0,1), p(y | x) = 1 / (x + 1).
        let prior = CountPrior::flat(0, 50).unwrap();
        let post = posterior_x_given_y(10, &bb(1.0, 1.0), &prior).unwrap();
        let z: f64 = (10..=50).map(|x| 1.0 / (x as f64 + 1.0)).sum();
        for x in 0..=50u64 {
            let expected = if x >= 10 { 1.0 / (x as f64 + 1.0) / z } else { 0.0 };
            assert_relative_eq!(post.prob(x), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_infeasible_report() {
        let prior = CountPrior::flat(0, 5).unwrap();
        assert!(matches!(
            posterior_x_given_y(6, &bb(1.0, 1.0), &prior),
            Err(Error::InfeasibleObservation(_))
        ));
    }

    #[test]
    fn mh_posterior_matches_enumeration() {
        let prior = CountPrior::flat(0, 50).unwrap();
        let exact = posterior_x_given_y(10, &bb(1.0, 1.0), &prior).unwrap();
        let config = MhConfig {
            steps: 52_000,
            burn_in: 2_000,
            thin: 1,
            proposal_scale: 8.0,
            seed: 11,
        };
        let sampled = posterior_x_given_y_mh(10, &bb(1.0, 1.0), &prior, &config).unwrap();
        let tv = exact.total_variation(&sampled);
        assert!(tv < 0.02, "tv = {tv}");
    }

    #[test]
    fn emission_approaches_poisson_when_fully_reported() {
        let params = bb(1e6, 1.0);
        for (y, lambda) in [(0u64, 3.0), (5, 4.2), (20, 18.5), (60, 75.0)] {
            let got = poisson_bb_likelihood(lambda, y, &params, TruncationRule::default());
            let want = ln_poisson_pmf(y, lambda).exp();
            assert_relative_eq!(got, want, max_relative = 1e-4);
        }
    }

    #[test]
    fn emission_normalizes_over_reports() {
        let params = bb(1.0, 1.0);
        let trunc = TruncationRule::default();
        let lambda = 5.0;
        let x_max = trunc.upper(lambda);
        let total: f64 = (0..=x_max)
            .map(|y| poisson_bb_likelihood(lambda, y, &params, trunc))
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "total = {total}");
    }

    #[test]
    fn emission_vanishing_intensity() {
        let v = poisson_bb_likelihood(1e-8, 0, &bb(2.0, 5.0), TruncationRule::default());
        assert!((v - 1.0).abs() < 1e-7);
        let z = ThinnedPoisson::new(3, bb(2.0, 5.0));
        assert_eq!(z.ln_likelihood(0.0), f64::NEG_INFINITY);
        assert_eq!(z.ln_likelihood(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn emission_matches_direct_sum() {
        for (y, lambda, a, b) in [
            (3u64, 40.0, 0.4, 0.3),
            (12, 30.0, 3.0, 5.0),
            (0, 120.0, 0.5, 0.5),
            (90, 100.0, 50.0, 2.0),
            (7, 250.0, 0.2, 0.9),
        ] {
            let params = bb(a, b);
            let trunc = TruncationRule::default();
            let direct: f64 = (y..=trunc.x_max(lambda, y))
                .map(|x| (ln_poisson_pmf(x, lambda) + ln_beta_binomial_pmf(y, x, &params)).exp())
                .sum();
            let fast = ThinnedPoisson::new(y, params).likelihood(lambda);
            assert_relative_eq!(fast, direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn mh_standard_normal_moments() {
        let config = MhConfig {
            steps: 100_000,
            burn_in: 1_000,
            thin: 1,
            proposal_scale: 2.4,
            seed: 3,
        };
        let xs = mh_sample(|x| -0.5 * x * x, 0.0, &config).unwrap();
        let m = crate::dist::mean(&xs);
        let v = crate::dist::population_variance(&xs);
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((v - 1.0).abs() < 0.1, "var {v}");
    }

    #[test]
    fn mh_respects_support_and_is_deterministic() {
        let config = MhConfig {
            steps: 5_000,
            burn_in: 100,
            thin: 1,
            proposal_scale: 3.0,
            seed: 9,
        };
        let pot = |l: f64| if l > 0.0 { ln_gamma_density(l, 2.0, 1.0) } else { f64::NEG_INFINITY };
        let a = mh_sample(pot, 0.5, &config).unwrap();
        let b = mh_sample(pot, 0.5, &config).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|l| *l > 0.0));
        assert_eq!(a.len(), config.n_atoms());
    }

    #[test]
    fn mh_rejects_invalid_start() {
        let config = MhConfig::default();
        let res = mh_sample(|l| if l > 0.0 { 0.0 } else { f64::NEG_INFINITY }, -1.0, &config);
        assert!(matches!(res, Err(Error::Initialization(_))));
        let bad = MhConfig {
            steps: 10,
            burn_in: 10,
            ..MhConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
