//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use lagcast::inference::{ln_gamma_density, ln_normal_density, ThinnedPoisson};

/// Exhaustive forward-backward over a discretized `(lambda, kappa)` lattice.
/// Both axes share the spacing `h` so that `lambda + kappa` lands on the grid.
pub struct GridOracle {
    pub h: f64,
    pub n_lambda: usize,
    pub half_kappa: usize,
}

pub struct GridMeans {
    pub filtering: Vec<f64>,
    pub smoothing: Vec<f64>,
}

impl GridOracle {
    fn lambda(&self, a: usize) -> f64 {
        (a + 1) as f64 * self.h
    }

    fn kappa(&self, b: usize) -> f64 {
        (b as f64 - self.half_kappa as f64) * self.h
    }

    /// Index of `lambda_a + kappa_b`, if it stays on the grid.
    fn shift(&self, a: usize, b: usize) -> Option<usize> {
        let a2 = a as i64 + b as i64 - self.half_kappa as i64;
        (a2 >= 0 && (a2 as usize) < self.n_lambda).then_some(a2 as usize)
    }

    pub fn run(
        &self,
        emissions: &[Option<ThinnedPoisson>],
        shape: f64,
        rate: f64,
        sigma: f64,
    ) -> GridMeans {
        let nl = self.n_lambda;
        let nk = 2 * self.half_kappa + 1;
        let big_t = emissions.len();
        let table: Vec<Vec<f64>> = emissions
            .iter()
            .map(|e| {
                (0..nl)
                    .map(|a| e.as_ref().map_or(1.0, |e| e.likelihood(self.lambda(a))))
                    .collect()
            })
            .collect();
        let em = |t: usize, a: usize| -> f64 { table[t][a] };
        let trans: Vec<Vec<f64>> = (0..nk)
            .map(|b| {
                (0..nk)
                    .map(|b2| ln_normal_density(self.kappa(b2), self.kappa(b), sigma).exp())
                    .collect()
            })
            .collect();
        let idx = |a: usize, b: usize| a * nk + b;

        let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(big_t);
        let mut a0 = vec![0.0; nl * nk];
        for a in 0..nl {
            let pl = ln_gamma_density(self.lambda(a), shape, rate).exp() * em(0, a);
            for b in 0..nk {
                a0[idx(a, b)] = pl * ln_normal_density(self.kappa(b), 0.0, sigma).exp();
            }
        }
        normalize(&mut a0);
        alphas.push(a0);
        for t in 1..big_t {
            let prev = &alphas[t - 1];
            let mut next = vec![0.0; nl * nk];
            for a in 0..nl {
                for b in 0..nk {
                    let p = prev[idx(a, b)];
                    if p == 0.0 {
                        continue;
                    }
                    for b2 in 0..nk {
                        if let Some(a2) = self.shift(a, b2) {
                            next[idx(a2, b2)] += p * trans[b][b2];
                        }
                    }
                }
            }
            for a in 0..nl {
                let e = em(t, a);
                for b in 0..nk {
                    next[idx(a, b)] *= e;
                }
            }
            normalize(&mut next);
            alphas.push(next);
        }

        let mut betas = vec![vec![1.0; nl * nk]; big_t];
        for t in (0..big_t - 1).rev() {
            let mut cur = vec![0.0; nl * nk];
            for a in 0..nl {
                for b in 0..nk {
                    let mut s = 0.0;
                    for b2 in 0..nk {
                        if let Some(a2) = self.shift(a, b2) {
                            s += trans[b][b2] * em(t + 1, a2) * betas[t + 1][idx(a2, b2)];
                        }
                    }
                    cur[idx(a, b)] = s;
                }
            }
            normalize(&mut cur);
            betas[t] = cur;
        }

        let lambda_mean = |w: &[f64]| -> f64 {
            let total: f64 = w.iter().sum();
            (0..nl)
                .map(|a| self.lambda(a) * (0..nk).map(|b| w[idx(a, b)]).sum::<f64>())
                .sum::<f64>()
                / total
        };
        let filtering = alphas.iter().map(|w| lambda_mean(w)).collect();
        let smoothing = alphas
            .iter()
            .zip(&betas)
            .map(|(a, b)| {
                let w: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                lambda_mean(&w)
            })
            .collect();
        GridMeans {
            filtering,
            smoothing,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}
