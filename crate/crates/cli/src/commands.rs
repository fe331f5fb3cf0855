use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use lagcast::baselines::{
    kalman_filter, moving_average, windowed_average, windowed_average_nowcast, write_baseline_csv, BaselineRow,
    MaWeights,
};
use lagcast::dist::CountPmf;
use lagcast::ingest::{
    build_triangles, group_snapshots, mark_convergence, parse_snapshot_csv, read_triangle_csv, write_snapshots_csv,
    write_triangle_csv, AdjacencyGraph, ReportTriangle,
};
use lagcast::monitor::{alert_report, consistency_series, select_sigma, write_sigma_scan_csv, AlertReport, SigmaScan};
use lagcast::priors::{build_prior_table, LagPriorTable};
use lagcast::simulator::generate;
use lagcast::smc::{
    backward_smooth, count_posteriors_json, evidence_terms, forward_filter, run, write_summary_csv, DaySummary, Model,
    RunConfig, Series,
};

use crate::config::Config;
use crate::output::{FileDigest, Manifest, OutputDir};
use crate::svg;

/// A failure confined to one area; other areas still produce output.
#[derive(Debug, Clone, Serialize)]
pub struct AreaError {
    pub area_id: String,
    pub kind: String,
    pub message: String,
}

impl AreaError {
    fn new(area: &str, e: &lagcast::Error) -> Self {
        Self {
            area_id: area.to_string(),
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug)]
pub struct AreaFailures(pub Vec<AreaError>);

impl std::fmt::Display for AreaFailures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} area(s) failed", self.0.len())
    }
}

impl std::error::Error for AreaFailures {}

pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
}

impl Ctx {
    fn manifest(&self, command: &str, inputs: &[PathBuf], sigma: Option<f64>) -> Result<Manifest> {
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            core_version: lagcast::VERSION,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            sigma,
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            outputs: Vec::new(),
            data_span: None,
        })
    }

    fn wants(&self, area: &str) -> bool {
        self.cfg.areas.is_empty() || self.cfg.areas.iter().any(|a| a == area)
    }
}

/// Expands directories to their `.csv` files, sorted by name.
pub fn collect_csv(paths: &[PathBuf], prefix: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .filter(|f| {
                    prefix.is_none_or(|pre| f.file_name().is_some_and(|n| n.to_string_lossy().starts_with(pre)))
                })
                .collect();
            files.sort();
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            bail!("no such file or directory: {}", p.display());
        }
    }
    Ok(out)
}

fn file_stem(area: &str) -> String {
    area.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

pub fn ingest(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    let files = collect_csv(inputs, None)?;
    if files.is_empty() {
        bail!(lagcast::Error::InsufficientData("empty input: no snapshot CSV files found".into()));
    }
    let mut records = Vec::new();
    let (mut rows, mut bad) = (0usize, 0usize);
    for f in &files {
        let parsed = parse_snapshot_csv(open(f)?).with_context(|| format!("reading {}", f.display()))?;
        for (line, msg) in &parsed.malformed {
            warn!("{}:{line}: {msg}", f.display());
        }
        rows += parsed.rows;
        bad += parsed.malformed.len();
        records.extend(parsed.records);
    }
    if rows > 0 && bad as f64 / rows as f64 > ctx.cfg.max_malformed {
        bail!(lagcast::Error::InvalidInput(format!(
            "{bad} of {rows} rows malformed, above the {} limit",
            ctx.cfg.max_malformed
        )));
    }
    if records.is_empty() {
        bail!(lagcast::Error::InsufficientData("empty input: no snapshot rows".into()));
    }
    let snapshots = group_snapshots(&records)?;
    let rule = ctx.cfg.convergence();
    let mut out = OutputDir::create(&ctx.out)?;
    for tri in build_triangles(&snapshots)? {
        if !ctx.wants(&tri.area_id) {
            continue;
        }
        let tri = mark_convergence(tri, &rule);
        let name = format!("triangle_{}.csv", file_stem(&tri.area_id));
        out.write_with(&name, |buf| write_triangle_csv(&[tri], buf))?;
    }
    let mut m = ctx.manifest("ingest", &files, None)?;
    m.data_span = match (snapshots.first(), snapshots.last()) {
        (Some(a), Some(b)) => Some((a.report_date.to_string(), b.report_date.to_string())),
        _ => None,
    };
    out.finish(m)
}

fn load_triangles(ctx: &Ctx, inputs: &[PathBuf]) -> Result<(Vec<ReportTriangle>, Vec<PathBuf>)> {
    let files = collect_csv(inputs, Some("triangle"))?;
    if files.is_empty() {
        bail!(lagcast::Error::InsufficientData("empty input: no triangle CSV files found".into()));
    }
    let mut tris = Vec::new();
    for f in &files {
        tris.extend(read_triangle_csv(open(f)?, &f.display().to_string())?);
    }
    tris.retain(|t| ctx.wants(&t.area_id));
    tris.sort_by(|a, b| a.area_id.cmp(&b.area_id));
    if tris.is_empty() {
        bail!(lagcast::Error::InsufficientData("no areas selected".into()));
    }
    Ok((tris, files))
}

fn load_graph(ctx: &Ctx, graph: Option<&Path>, inputs: &mut Vec<PathBuf>) -> Result<Option<AdjacencyGraph>> {
    let path = graph.map(Path::to_path_buf).or_else(|| ctx.cfg.graph.as_ref().map(PathBuf::from));
    let Some(path) = path else {
        return Ok(None);
    };
    let g = AdjacencyGraph::read_csv(open(&path)?)?;
    inputs.push(path);
    Ok(Some(g))
}

fn load_priors(
    ctx: &Ctx,
    priors: Option<&Path>,
    tris: &[ReportTriangle],
    inputs: &mut Vec<PathBuf>,
) -> Result<LagPriorTable> {
    match priors {
        Some(p) => {
            let t = LagPriorTable::read_csv(open(p)?, &p.display().to_string())?;
            inputs.push(p.to_path_buf());
            Ok(t)
        }
        None => {
            let graph = load_graph(ctx, None, inputs)?;
            Ok(build_prior_table(tris, graph.as_ref(), &ctx.cfg.prior_config()?))
        }
    }
}

pub fn priors(ctx: &Ctx, inputs: &[PathBuf], graph: Option<&Path>) -> Result<()> {
    let (tris, mut files) = load_triangles(ctx, inputs)?;
    let graph = load_graph(ctx, graph, &mut files)?;
    let table = build_prior_table(&tris, graph.as_ref(), &ctx.cfg.prior_config()?);
    let mut out = OutputDir::create(&ctx.out)?;
    out.write_with("priors.csv", |buf| table.write_csv(buf))?;
    out.finish(ctx.manifest("priors", &files, None)?)
}

/// Builds each area's model, skipping areas the prior table does not cover.
fn models(tris: &[ReportTriangle], priors: &LagPriorTable, run: &RunConfig, lag: Option<u32>) -> Vec<Model> {
    tris.iter()
        .filter_map(|tri| {
            let series = match lag {
                Some(j) => Series::at_lag(tri, j),
                None => Series::latest(tri),
            };
            match Model::new(series, priors, run) {
                Ok(m) => Some(m),
                Err(e) => {
                    warn!("skipping area {}: {e}", tri.area_id);
                    None
                }
            }
        })
        .collect()
}

fn split<T>(results: Vec<(String, lagcast::Result<T>)>) -> (Vec<(String, T)>, Vec<AreaError>) {
    let mut ok = Vec::new();
    let mut errs = Vec::new();
    for (area, r) in results {
        match r {
            Ok(v) => ok.push((area, v)),
            Err(e) => {
                warn!("area {area}: {e}");
                errs.push(AreaError::new(&area, &e));
            }
        }
    }
    (ok, errs)
}

fn finish_areas(errors: Vec<AreaError>) -> Result<()> {
    if errors.is_empty() {
        Ok(())
    } else {
        Err(AreaFailures(errors).into())
    }
}

#[derive(Serialize)]
struct CountSummary {
    date: String,
    mean: f64,
    q05: u64,
    median: u64,
    q95: u64,
    pmf: CountPmf,
}

#[derive(Serialize)]
struct AreaNowcast {
    area_id: String,
    sigma: f64,
    log_evidence: f64,
    latest: CountSummary,
    smoothing_fallback_steps: Vec<usize>,
}

fn baseline_rows(
    ctx: &Ctx,
    model: &Model,
    counts: &[CountPmf],
) -> lagcast::Result<Vec<BaselineRow>> {
    let s = &model.series;
    let area = s.area_id.as_str();
    let mut rows = Vec::new();
    let observed: Vec<(usize, f64)> = s
        .obs
        .iter()
        .enumerate()
        .filter_map(|(t, o)| o.map(|o| (t, o.count as f64)))
        .collect();
    let y: Vec<f64> = observed.iter().map(|(_, v)| *v).collect();
    if y.is_empty() {
        return Ok(rows);
    }
    let push = |rows: &mut Vec<BaselineRow>, t: usize, name: &str, value: f64| {
        rows.push(BaselineRow {
            area_id: area.to_string(),
            date: s.dates[t],
            estimator: name.to_string(),
            value,
        })
    };
    let uni = moving_average(&y, 7, MaWeights::Uniform);
    let lin = moving_average(&y, 7, MaWeights::Linear);
    let kal = kalman_filter(&y, &ctx.cfg.kalman(y[0]))?;
    for (k, (t, _)) in observed.iter().enumerate() {
        push(&mut rows, *t, "ma7_uniform", uni[k]);
        push(&mut rows, *t, "ma7_linear", lin[k]);
        push(&mut rows, *t, "kalman_mean", kal[k].mean);
    }
    let last = s.len() - 1;
    let end = s.dates[last];
    if let Some(obs) = s.obs[last] {
        let posts: BTreeMap<_, _> = s.dates.iter().copied().zip(counts.iter().cloned()).collect();
        let window = ctx.cfg.wa_window;
        if let Ok(wa) = windowed_average_nowcast(&posts, end, window) {
            push(&mut rows, last, &format!("wa_lag{}", obs.lag), wa);
            let finals: BTreeMap<_, _> = s
                .dates
                .iter()
                .zip(&s.final_counts)
                .filter_map(|(d, x)| x.map(|x| (*d, x as f64)))
                .collect();
            if let Ok(truth) = windowed_average(&finals, end, window) {
                push(&mut rows, last, &format!("ae_lag{}", obs.lag), (wa - truth).abs());
            }
        }
    }
    Ok(rows)
}

pub fn nowcast(ctx: &Ctx, inputs: &[PathBuf], priors: Option<&Path>, plots: bool) -> Result<()> {
    let (tris, mut files) = load_triangles(ctx, inputs)?;
    let table = load_priors(ctx, priors, &tris, &mut files)?;
    let run_cfg = ctx.cfg.run_config()?;
    let models = models(&tris, &table, &run_cfg, None);
    let results: Vec<_> = models
        .par_iter()
        .map(|m| (m.series.area_id.clone(), run(m, &run_cfg).map(|o| (m, o))))
        .collect();
    let (ok, errors) = split(results);

    let mut out = OutputDir::create(&ctx.out)?;
    let mut summaries: Vec<(String, Vec<DaySummary>)> = Vec::new();
    let mut report = Vec::new();
    let mut baselines = Vec::new();
    for (area, (model, o)) in &ok {
        let sums = o.summaries(model);
        let last = o.counts.len() - 1;
        let c = &o.counts[last];
        report.push(AreaNowcast {
            area_id: area.clone(),
            sigma: run_cfg.sigma,
            log_evidence: o.log_evidence(),
            latest: CountSummary {
                date: model.series.dates[last].to_string(),
                mean: c.mean(),
                q05: c.quantile(0.05),
                median: c.quantile(0.5),
                q95: c.quantile(0.95),
                pmf: c.clone(),
            },
            smoothing_fallback_steps: o.smoothing.fallback_steps.clone(),
        });
        baselines.extend(baseline_rows(ctx, model, &o.counts)?);
        out.write_json(
            &format!("counts_{}.json", file_stem(area)),
            &count_posteriors_json(&model.series.dates, &o.counts),
        )?;
        if plots {
            out.write(&format!("plot_{}.svg", file_stem(area)), svg::chart(model, &sums).as_bytes())?;
        }
        summaries.push((area.clone(), sums));
    }
    let refs: Vec<(&str, &[DaySummary])> = summaries.iter().map(|(a, s)| (a.as_str(), s.as_slice())).collect();
    out.write_with("summary.csv", |buf| write_summary_csv(&refs, buf))?;
    out.write_with("baselines.csv", |buf| write_baseline_csv(&baselines, buf))?;
    out.write_json("nowcast.json", &report)?;
    out.finish(ctx.manifest("nowcast", &files, Some(run_cfg.sigma))?)?;
    finish_areas(errors)
}

pub fn scan_sigma(ctx: &Ctx, inputs: &[PathBuf], priors: Option<&Path>, grid: &[f64]) -> Result<()> {
    let (tris, mut files) = load_triangles(ctx, inputs)?;
    let table = load_priors(ctx, priors, &tris, &mut files)?;
    let run_cfg = ctx.cfg.run_config()?;
    let models = models(&tris, &table, &run_cfg, None);
    let results: Vec<(String, lagcast::Result<SigmaScan>)> = models
        .par_iter()
        .map(|m| (m.series.area_id.clone(), select_sigma(m, grid, &run_cfg)))
        .collect();
    let (ok, errors) = split(results);
    let mut out = OutputDir::create(&ctx.out)?;
    let mut all = BTreeMap::new();
    for (area, scan) in ok {
        out.write_with(&format!("sigma_scan_{}.csv", file_stem(&area)), |buf| {
            write_sigma_scan_csv(&scan, buf)
        })?;
        all.insert(area, scan);
    }
    out.write_json("sigma_scan.json", &all)?;
    out.finish(ctx.manifest("scan-sigma", &files, None)?)?;
    finish_areas(errors)
}

pub fn alert(ctx: &Ctx, inputs: &[PathBuf], priors: Option<&Path>) -> Result<()> {
    let Some(threshold) = ctx.cfg.threshold else {
        bail!(lagcast::Error::InvalidInput("alert needs --threshold or `threshold` in the config".into()));
    };
    let (tris, mut files) = load_triangles(ctx, inputs)?;
    let table = load_priors(ctx, priors, &tris, &mut files)?;
    let run_cfg = ctx.cfg.run_config()?;
    let models = models(&tris, &table, &run_cfg, None);
    let results: Vec<(String, lagcast::Result<AlertReport>)> = models
        .par_iter()
        .map(|m| {
            let r = forward_filter(m, &run_cfg)
                .and_then(|states| backward_smooth(&states, &m.series, &run_cfg))
                .map(|sm| alert_report(&sm, threshold, ctx.cfg.trigger));
            (m.series.area_id.clone(), r)
        })
        .collect();
    let (ok, errors) = split(results);
    let reports: Vec<AlertReport> = ok.into_iter().map(|(_, r)| r).collect();
    let mut out = OutputDir::create(&ctx.out)?;
    out.write_json("alerts.json", &reports)?;
    out.finish(ctx.manifest("alert", &files, Some(run_cfg.sigma))?)?;
    finish_areas(errors)
}

#[derive(Serialize)]
struct AreaMonitor {
    area_id: String,
    lag: u32,
    flagged_report_dates: Vec<String>,
}

pub fn monitor(ctx: &Ctx, inputs: &[PathBuf], priors: Option<&Path>) -> Result<()> {
    let (tris, mut files) = load_triangles(ctx, inputs)?;
    let table = load_priors(ctx, priors, &tris, &mut files)?;
    let run_cfg = ctx.cfg.run_config()?;
    let lag = ctx.cfg.monitor_lag;
    let mcfg = ctx.cfg.monitor();
    let models = models(&tris, &table, &run_cfg, Some(lag));
    let results: Vec<_> = models
        .par_iter()
        .map(|m| {
            let r = forward_filter(m, &run_cfg).and_then(|states| {
                let ev = evidence_terms(&states, m, &run_cfg);
                consistency_series(m, &states, &run_cfg, &mcfg).map(|pts| (pts, ev))
            });
            (m.series.area_id.clone(), r.map(|v| (m, v)))
        })
        .collect();
    let (ok, errors) = split(results);

    let mut csv_out = Vec::new();
    let mut summary = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut csv_out);
        wtr.write_record([
            "area_id",
            "test_date",
            "report_date",
            "lag",
            "consistency",
            "baseline",
            "flagged",
            "log_evidence_term",
        ])?;
        for (area, (model, (pts, ev))) in &ok {
            for p in pts {
                let t = model.series.index_of(p.test_date).expect("monitored day is in the series");
                wtr.write_record([
                    area.clone(),
                    p.test_date.to_string(),
                    p.report_date.to_string(),
                    p.lag.to_string(),
                    format!("{}", p.value),
                    p.baseline.map(|b| format!("{b}")).unwrap_or_default(),
                    p.flagged.to_string(),
                    format!("{}", ev[t]),
                ])?;
            }
            summary.push(AreaMonitor {
                area_id: area.clone(),
                lag,
                flagged_report_dates: pts.iter().filter(|p| p.flagged).map(|p| p.report_date.to_string()).collect(),
            });
        }
        wtr.flush()?;
    }
    let mut out = OutputDir::create(&ctx.out)?;
    out.write("monitor.csv", &csv_out)?;
    out.write_json("monitor.json", &summary)?;
    out.finish(ctx.manifest("monitor", &files, Some(run_cfg.sigma))?)?;
    finish_areas(errors)
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let scenario = ctx.cfg.scenario()?;
    let data = generate(&scenario)?;
    let mut out = OutputDir::create(&ctx.out)?;
    out.write_with("snapshots.csv", |buf| write_snapshots_csv(&data.snapshots, buf))?;
    out.write_with("truth.csv", |buf| data.write_truth_csv(buf))?;
    out.write_json("scenario.json", &scenario)?;
    let mut m = ctx.manifest("simulate", &[], None)?;
    m.data_span = Some((scenario.start_date.to_string(), scenario.last_report_date().to_string()));
    out.finish(m)
}
