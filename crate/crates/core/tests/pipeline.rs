use lagcast::inference::BetaBinomialParams;
use lagcast::ingest::{
    add_days, build_triangle, group_snapshots, mark_convergence, parse_snapshot_csv, write_snapshots_csv, AdjacencyGraph,
    ConvergenceRule,
};
use lagcast::priors::{build_prior_table, LagPrior, LagPriorTable, PriorConfig, PriorSource};
use lagcast::simulator::{generate, ScenarioConfig};
use proptest::prelude::*;

fn scenario(area: &str, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        area_id: area.into(),
        days: 40,
        lambda0: 3000.0,
        sigma_true: 2.0,
        report_tail: 10,
        seed,
        ..Default::default()
    }
}

#[test]
fn snapshot_csv_rebuilds_the_simulated_triangle() {
    let sim = generate(&scenario("E1", 7)).unwrap();
    let mut buf = Vec::new();
    write_snapshots_csv(&sim.snapshots, &mut buf).unwrap();
    let parsed = parse_snapshot_csv(buf.as_slice()).unwrap();
    assert!(parsed.malformed.is_empty());
    let snaps = group_snapshots(&parsed.records).unwrap();
    assert_eq!(snaps, sim.snapshots);
    assert_eq!(build_triangle(&snaps, "E1").unwrap(), sim.triangle());
}

#[test]
fn temporal_priors_track_the_simulated_schedule() {
    let cfg = scenario("E1", 11);
    let sim = generate(&cfg).unwrap();
    let tri = mark_convergence(sim.triangle(), &ConvergenceRule::default());
    let table = build_prior_table(&[tri], None, &PriorConfig::default());
    for (j, truth) in cfg.theta_schedule.iter().enumerate() {
        let p = table.get("E1", j as u32 + 1).unwrap();
        assert_eq!(p.source, PriorSource::Temporal);
        assert!(
            (p.params.mean() - truth.mean()).abs() < 0.03,
            "lag {}: {} vs {}",
            j + 1,
            p.params.mean(),
            truth.mean()
        );
    }
    // Past the schedule every rate is exactly one.
    let tail = table.get("E1", cfg.tau() + 1).unwrap();
    assert!(tail.params.mean() > 0.999);
}

#[test]
fn area_without_history_borrows_from_neighbours() {
    let a = mark_convergence(generate(&scenario("A", 1)).unwrap().triangle(), &ConvergenceRule::default());
    let b = mark_convergence(generate(&scenario("B", 2)).unwrap().triangle(), &ConvergenceRule::default());
    // C has only its last few days, none of them converged.
    let c_cfg = ScenarioConfig {
        area_id: "C".into(),
        report_tail: 1,
        ..scenario("C", 3)
    };
    let c_full = generate(&c_cfg).unwrap().triangle();
    let c = mark_convergence(c_full.as_of(add_days(c_full.start_date().unwrap(), 3)), &ConvergenceRule::default());
    let graph = AdjacencyGraph::from_edges([("A", "C"), ("B", "C")]).unwrap();
    let table = build_prior_table(&[a, b, c], Some(&graph), &PriorConfig::default());
    let lag1 = table.get("C", 1).unwrap();
    assert_eq!(lag1.source, PriorSource::Spatial);
    assert!((lag1.params.mean() - 0.35).abs() < 0.05);

    let alone = build_prior_table(&[short_triangle("D")], None, &PriorConfig::default());
    assert_eq!(alone.get("D", 1).unwrap().source, PriorSource::Fallback);
}

fn short_triangle(area: &str) -> lagcast::ingest::ReportTriangle {
    let sim = generate(&ScenarioConfig {
        area_id: area.into(),
        days: 2,
        ..Default::default()
    })
    .unwrap();
    mark_convergence(sim.triangle(), &ConvergenceRule::default())
}

proptest! {
    #[test]
    fn prior_table_csv_round_trip(
        rows in prop::collection::vec((1u32..10, 1e-3f64..1e6, 1e-3f64..1e6), 1..12)
    ) {
        let mut table = LagPriorTable::new();
        for (lag, a, b) in &rows {
            table.insert("X", *lag, LagPrior {
                params: BetaBinomialParams::new(*a, *b).unwrap(),
                source: PriorSource::Fallback,
                window: None,
            });
        }
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = LagPriorTable::read_csv(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back, table);
    }
}
