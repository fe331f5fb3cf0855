mod common;

use chrono::NaiveDate;
use common::GridOracle;
use lagcast::dist::mean;
use lagcast::inference::BetaBinomialParams;
use lagcast::simulator::{generate, ScenarioConfig};
use lagcast::smc::{backward_smooth, forward_filter, GammaPrior, Model, Observation, RunConfig, Series};

fn series(counts: &[u64]) -> Series {
    Series::new(
        "grid",
        NaiveDate::from_ymd_opt(2020, 11, 2).unwrap(),
        counts
            .iter()
            .map(|c| Some(Observation { lag: 7, count: *c }))
            .collect(),
    )
}

#[test]
fn filtering_and_smoothing_match_grid_oracle() {
    let oracle = GridOracle {
        h: 0.4,
        n_lambda: 200,
        half_kappa: 100,
    };
    let prior = GammaPrior { shape: 30.0, rate: 1.0 };
    let sigma = 2.0;
    for seed in 0..5u64 {
        let sim = generate(&ScenarioConfig {
            days: 5,
            lambda0: 30.0,
            sigma_true: 1.0,
            seed: 100 + seed,
            ..Default::default()
        })
        .unwrap();
        let counts: Vec<u64> = sim.truth.iter().map(|r| r.x.min(50)).collect();
        let cfg = RunConfig {
            sigma,
            n_particles: 5000,
            m_smooth: 5000,
            weekend_prior: None,
            lambda0_prior: Some(prior),
            seed,
            ..Default::default()
        };
        let model = Model::with_params(series(&counts), &cfg, |_| BetaBinomialParams::new(1e6, 1.0).unwrap());
        let states = forward_filter(&model, &cfg).unwrap();
        let sm = backward_smooth(&states, &model.series, &cfg).unwrap();
        let grid = oracle.run(&model.emissions, prior.shape, prior.rate, sigma);
        for t in 0..counts.len() {
            let f = mean(&states[t].lambda);
            let s = mean(&sm.lambda[t]);
            let ef = (f - grid.filtering[t]).abs() / grid.filtering[t];
            let es = (s - grid.smoothing[t]).abs() / grid.smoothing[t];
            println!(
                "seed {seed} t {t} y {} filter {f:.3} vs {:.3} ({ef:.4}) smooth {s:.3} vs {:.3} ({es:.4})",
                counts[t], grid.filtering[t], grid.smoothing[t]
            );
            assert!(ef < 0.03 && es < 0.03);
        }
    }
}
