mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{AreaFailures, Ctx};
use config::Config;

/// Now-casting of lagged, under-reported daily counts.
#[derive(Parser, Debug)]
#[command(name = "lagcast", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat TOML configuration file.
    #[arg(long, global = true, env = "LAGCAST_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Random-walk scale of the drift.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Particles per filtering and smoothing step.
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Intensity threshold for alerts.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated area ids to process (default: all).
    #[arg(long, global = true, value_delimiter = ',')]
    areas: Option<Vec<String>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build per-area reporting triangles from snapshot CSVs.
    Ingest {
        /// Snapshot files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Fit per-lag reporting-rate priors.
    Priors {
        /// Triangle files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Edge list `area_a,area_b` for the spatial estimator.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Smooth intensities and counts and report the current count.
    Nowcast {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Prior table; fitted from the triangles when absent.
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Also write an SVG chart per area.
        #[arg(long)]
        svg: bool,
    },
    /// Log evidence over a grid of drift scales.
    ScanSigma {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Comma-separated grid (default from config).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Probability that the intensity exceeds a threshold, per day.
    Alert {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        priors: Option<PathBuf>,
    },
    /// Consistency of each report with the model's prediction.
    Monitor {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Report lag to monitor.
        #[arg(long)]
        lag: Option<u32>,
    },
    /// Write a synthetic snapshot set and its ground truth.
    Simulate,
}

fn resolve(global: &Global) -> Result<Config> {
    let mut cfg = Config::load(global.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(s) = global.sigma {
        cfg.sigma = s;
    }
    if let Some(n) = global.particles {
        cfg.particles = n;
        cfg.smooth_particles = n;
    }
    if let Some(v) = global.threshold {
        cfg.threshold = Some(v);
    }
    if let Some(a) = &global.areas {
        cfg.areas = a.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    if let Command::Monitor { lag: Some(j), .. } = &cli.command {
        cfg.monitor_lag = *j;
    }
    let ctx = Ctx {
        cfg,
        out: cli.global.out.clone(),
    };
    match &cli.command {
        Command::Ingest { inputs } => commands::ingest(&ctx, inputs),
        Command::Priors { inputs, graph } => commands::priors(&ctx, inputs, graph.as_deref()),
        Command::Nowcast { inputs, priors, svg } => commands::nowcast(&ctx, inputs, priors.as_deref(), *svg),
        Command::ScanSigma { inputs, priors, grid } => {
            let grid = grid.clone().unwrap_or_else(|| ctx.cfg.sigma_grid.clone());
            commands::scan_sigma(&ctx, inputs, priors.as_deref(), &grid)
        }
        Command::Alert { inputs, priors } => commands::alert(&ctx, inputs, priors.as_deref()),
        Command::Monitor { inputs, priors, .. } => commands::monitor(&ctx, inputs, priors.as_deref()),
        Command::Simulate => commands::simulate(&ctx),
    }
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    if let Some(AreaFailures(areas)) = e.downcast_ref::<AreaFailures>() {
        return json!({ "error": { "kind": "area_failures", "message": e.to_string(), "areas": areas } });
    }
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<lagcast::Error>())
        .map(|le| le.kind())
        .unwrap_or("cli");
    let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    json!({ "error": { "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
