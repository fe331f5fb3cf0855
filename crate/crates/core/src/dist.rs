//! Discrete count distributions and order statistics over particle atoms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized probability mass function over a contiguous range of counts
/// `start..start + probs.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPmf {
    start: u64,
    probs: Vec<f64>,
}

impl CountPmf {
    /// Normalizes non-negative weights over `start..start + weights.len()`.
    pub fn from_weights(start: u64, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("count weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InfeasibleObservation("zero total mass".into()));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { start, probs })
    }

    /// Builds a pmf from unnormalized log weights, subtracting the maximum first.
    pub fn from_log_weights(start: u64, log_weights: &[f64]) -> Result<Self> {
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::InfeasibleObservation("zero total mass".into()));
        }
        let weights = log_weights.iter().map(|lw| (lw - max).exp()).collect();
        Self::from_weights(start, weights)
    }

    pub fn point_mass(x: u64) -> Self {
        Self {
            start: x,
            probs: vec![1.0],
        }
    }

    /// Empirical distribution of integer samples.
    pub fn from_samples(samples: &[u64]) -> Result<Self> {
        let (lo, hi) = match (samples.iter().min(), samples.iter().max()) {
            (Some(lo), Some(hi)) => (*lo, *hi),
            _ => return Err(Error::InsufficientData("no samples".into())),
        };
        let mut counts = vec![0.0; (hi - lo + 1) as usize];
        for s in samples {
            counts[(s - lo) as usize] += 1.0;
        }
        Self::from_weights(lo, counts)
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    /// One past the last count in the support.
    pub fn end(&self) -> u64 {
        self.start + self.probs.len() as u64
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: u64) -> f64 {
        if x < self.start {
            return 0.0;
        }
        self.probs
            .get((x - self.start) as usize)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(k, p)| (self.start + k as u64, *p))
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(x, p)| x as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.iter()
            .map(|(x, p)| {
                let d = x as f64 - mean;
                d * d * p
            })
            .sum()
    }

    pub fn mode(&self) -> u64 {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        self.start + best as u64
    }

    /// Smallest count whose cumulative probability reaches `q`.
    pub fn quantile(&self, q: f64) -> u64 {
        let mut acc = 0.0;
        for (x, p) in self.iter() {
            acc += p;
            if acc >= q - 1e-12 {
                return x;
            }
        }
        self.end() - 1
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Total-variation distance; supports are aligned by zero-extension.
    pub fn total_variation(&self, other: &CountPmf) -> f64 {
        let lo = self.start.min(other.start);
        let hi = self.end().max(other.end());
        0.5 * (lo..hi)
            .map(|x| (self.prob(x) - other.prob(x)).abs())
            .sum::<f64>()
    }

    /// Expectation of `other`'s pmf under `self`: `sum_x self(x) * other(x)`.
    pub fn expect_pmf(&self, other: &CountPmf) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end().min(other.end());
        (lo..hi).map(|x| self.prob(x) * other.prob(x)).sum()
    }
}

/// Linear-interpolation sample quantile of already sorted data.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

/// Sample quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted_quantile(&sorted, q)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (divisor `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Mean and 5%/50%/95% quantiles of a set of atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSummary {
    pub mean: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
}

impl AtomSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: mean(values),
            q05: sorted_quantile(&sorted, 0.05),
            median: sorted_quantile(&sorted, 0.5),
            q95: sorted_quantile(&sorted, 0.95),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_weights() {
        let pmf = CountPmf::from_weights(3, vec![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(pmf.prob(5), 0.5);
        assert_eq!(pmf.prob(2), 0.0);
        assert_eq!(pmf.prob(9), 0.0);
        assert!((pmf.mean() - 4.25).abs() < 1e-12);
        assert_eq!(pmf.mode(), 5);
        assert_eq!(pmf.quantile(0.5), 4);
    }

    #[test]
    fn zero_mass_is_infeasible() {
        assert!(matches!(
            CountPmf::from_weights(0, vec![0.0, 0.0]),
            Err(Error::InfeasibleObservation(_))
        ));
        assert!(CountPmf::from_log_weights(0, &[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn total_variation_zero_extends() {
        let a = CountPmf::point_mass(4);
        let b = CountPmf::from_weights(5, vec![1.0]).unwrap();
        assert!((a.total_variation(&b) - 1.0).abs() < 1e-15);
        assert_eq!(a.total_variation(&a), 0.0);
    }

    #[test]
    fn interpolated_quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        let s = AtomSummary::of(&v);
        assert!(s.q05 <= s.median && s.median <= s.q95);
    }
}
