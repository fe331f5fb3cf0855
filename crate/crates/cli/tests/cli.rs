use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use lagcast::ingest::{build_triangles, group_snapshots, mark_convergence, parse_snapshot_csv, write_triangle_csv, ConvergenceRule};

fn lagcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = lagcast(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line");
    let v: Value = serde_json::from_str(line).expect("error is JSON");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn small_config(dir: &Path, extra: &str) {
    fs::write(
        dir.join("run.toml"),
        format!("particles = 300\nsmooth_particles = 300\nsim_days = 30\nsim_lambda0 = 2000.0\n{extra}"),
    )
    .unwrap();
}

#[test]
fn ingest_matches_the_library_triangle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir, "");
    ok(dir, &["--config", "run.toml", "simulate", "--out", "sim"]);
    ok(dir, &["ingest", "sim/snapshots.csv", "--out", "tri"]);

    let parsed = parse_snapshot_csv(fs::File::open(dir.join("sim/snapshots.csv")).unwrap()).unwrap();
    assert!(parsed.malformed.is_empty());
    let snaps = group_snapshots(&parsed.records).unwrap();
    let tri = mark_convergence(build_triangles(&snaps).unwrap().remove(0), &ConvergenceRule::default());
    let mut expected = Vec::new();
    write_triangle_csv(&[tri], &mut expected).unwrap();
    assert_eq!(fs::read(dir.join("tri/triangle_sim.csv")).unwrap(), expected);
}

#[test]
fn manifest_hashes_match_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir, "");
    ok(dir, &["--config", "run.toml", "simulate", "--out", "sim"]);
    let m = json(&dir.join("sim/manifest_simulate.json"));
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for o in outputs {
        let bytes = fs::read(dir.join("sim").join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(bytes)));
    }
    assert_eq!(m["seed"], 0);
}

#[test]
fn empty_input_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = lagcast(tmp.path(), &["ingest", "empty"]);
    assert_eq!(error_kind(&out), "insufficient_data");
    assert!(!tmp.path().join("out").exists());
}

fn snapshot_file(dir: &Path, bad: usize) {
    let mut s = String::from("area_id,test_date,report_date,count\n");
    for d in 1..=20u32 {
        for lag in 1..=5u32 {
            s.push_str(&format!("A,2020-10-{d:02},2020-10-{:02},{}\n", d + lag, 10 * lag));
        }
    }
    for _ in 0..bad {
        s.push_str("A,2020-10-40,2020-10-41,oops\n");
    }
    fs::write(dir.join("snaps.csv"), s).unwrap();
}

#[test]
fn malformed_rows_abort_above_the_limit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // 100 good rows plus one bad row stays under 1%.
    snapshot_file(dir, 1);
    ok(dir, &["ingest", "snaps.csv"]);
    snapshot_file(dir, 3);
    assert_eq!(error_kind(&lagcast(dir, &["ingest", "snaps.csv", "--out", "x"])), "invalid_input");
}

#[test]
fn scan_alert_and_nowcast() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir, "");
    ok(dir, &["--config", "run.toml", "simulate", "--out", "sim"]);
    ok(dir, &["ingest", "sim/snapshots.csv", "--out", "tri"]);
    ok(dir, &["priors", "tri", "--out", "pri"]);

    ok(dir, &["--config", "run.toml", "scan-sigma", "tri", "--priors", "pri/priors.csv", "--grid", "5", "--out", "scan"]);
    let scan = json(&dir.join("scan/sigma_scan.json"));
    let points = scan["sim"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(scan["sim"]["best"], 5.0);
    assert!(points[0]["log_evidence"].as_f64().unwrap().is_finite());

    ok(dir, &["--config", "run.toml", "--threshold", "1e9", "alert", "tri", "--out", "alert"]);
    let alerts = json(&dir.join("alert/alerts.json"));
    let days = alerts[0]["days"].as_array().unwrap();
    assert_eq!(days.len(), 30);
    assert!(days.iter().all(|d| d["p_above_threshold"] == 0.0));
    assert_eq!(alerts[0]["triggered"], false);
    assert!(alerts[0]["first_alert"].is_null());

    assert_eq!(
        error_kind(&lagcast(dir, &["--config", "run.toml", "alert", "tri", "--out", "a2"])),
        "invalid_input"
    );

    ok(dir, &["--config", "run.toml", "nowcast", "tri", "--svg", "--out", "now"]);
    let svg = fs::read_to_string(dir.join("now/plot_sim.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let summary = fs::read_to_string(dir.join("now/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 30 * 8);
    let baselines = fs::read_to_string(dir.join("now/baselines.csv")).unwrap();
    assert!(baselines.contains("kalman_mean") && baselines.contains("ma7_uniform"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "sigmaa = 2.0\n").unwrap();
    let out = lagcast(tmp.path(), &["--config", "bad.toml", "simulate"]);
    assert_eq!(error_kind(&out), "cli");
}

#[test]
fn monitor_flags_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("run.toml"),
        "seed = 3\nsigma = 2.0\nweekend = false\nsim_days = 40\nsim_lambda0 = 1000.0\nsim_sigma = 2.0\n\
         sim_fault_start = 2020-11-01\nsim_fault_end = 2020-11-03\nsim_fault_fraction = 0.5\n",
    )
    .unwrap();
    ok(dir, &["--config", "run.toml", "simulate", "--out", "sim"]);

    // Priors come from the reports published before the fault.
    let all = fs::read_to_string(dir.join("sim/snapshots.csv")).unwrap();
    let mut before = String::new();
    for (i, line) in all.lines().enumerate() {
        if i == 0 || line.split(',').nth(2).is_some_and(|r| r < "2020-11-01") {
            before.push_str(line);
            before.push('\n');
        }
    }
    fs::create_dir(dir.join("hist")).unwrap();
    fs::write(dir.join("hist/snapshots.csv"), before).unwrap();
    ok(dir, &["ingest", "hist", "--out", "hist_tri"]);
    ok(dir, &["priors", "hist_tri", "--out", "pri"]);
    ok(dir, &["ingest", "sim/snapshots.csv", "--out", "tri"]);
    ok(dir, &["--config", "run.toml", "monitor", "tri", "--priors", "pri/priors.csv", "--out", "mon"]);

    let mon = json(&dir.join("mon/monitor.json"));
    let flagged: Vec<&str> = mon[0]["flagged_report_dates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(
        flagged.iter().any(|d| ("2020-11-01"..="2020-11-03").contains(d)),
        "flagged {flagged:?}"
    );
    let rows = fs::read_to_string(dir.join("mon/monitor.csv")).unwrap();
    assert!(rows.starts_with("area_id,test_date,report_date,lag,consistency,baseline,flagged,log_evidence_term"));
}
