//! Configuration-driven experiment runner behind the `fedco` binary.
//!
//! Subcommands: `generate`, `run`, `sweep`, `compare` and
//! `estimate-constants`. Every artifact except `timing.json` is a pure
//! function of the resolved configuration, so reruns and different
//! `--jobs` values produce byte-identical files.

pub mod config;
pub mod report;
pub mod store;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::algorithms::TraceLevel;
use crate::diagnostics::{default_probes, estimate_constants, reference_distance, HeterogeneityStats};
use crate::error::{FcoError, Result};
use crate::exec::Execution;
use crate::problems::full_objective;
use crate::regularizers::Regularizer;

pub use config::{ExperimentConfig, TraceSetting, PAPER_ETA_C, PAPER_ETA_S};
pub use report::{default_target, leaderboard, maximize, selection_window, window_score, CellOutcome, CellStatus};
pub use store::{read_dataset, DatasetSidecar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const DEFAULT_OUT: &str = "fedco-out";

#[derive(Debug, Parser)]
#[command(name = "fedco", version, about = "Federated composite optimization simulator")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub trace: Option<TraceSetting>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write dataset.bin and its dataset.json sidecar.
    Generate,
    /// Run every grid cell; write series.csv and summary.json.
    Run,
    /// Run the grid in parallel over cells and rank cells in leaderboard.json.
    Sweep,
    /// Align series files by round; write compare.csv and deltas.csv.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Estimate ζ, σ, G, L and the distance to a reference solution.
    EstimateConstants,
}

pub fn exit_code(e: &FcoError) -> i32 {
    match e {
        FcoError::Config(_) | FcoError::Validation(_) | FcoError::Parameter(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn error_kind(e: &FcoError) -> &'static str {
    match e {
        FcoError::Dimension(_) => "dimension",
        FcoError::Domain(_) => "domain",
        FcoError::Parameter(_) => "parameter",
        FcoError::Unsupported(_) => "unsupported",
        FcoError::Unavailable(_) => "unavailable",
        FcoError::Diverged { .. } => "diverged",
        FcoError::Config(_) => "config",
        FcoError::Validation(_) => "validation",
        FcoError::Io(_) => "io",
    }
}

/// The JSON document printed on stderr when a command fails.
pub fn error_json(e: &FcoError) -> String {
    serde_json::json!({
        "error": {
            "kind": error_kind(e),
            "exit_code": exit_code(e),
            "message": e.to_string(),
        }
    })
    .to_string()
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDCO_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match cli.jobs {
        Some(0) => Err(FcoError::Config("--jobs must be at least 1".into())),
        Some(n) => with_threads(n, || dispatch(cli)),
        None => dispatch(cli),
    }
}

#[cfg(feature = "parallel")]
fn with_threads<F: FnOnce() -> Result<()> + Send>(n: usize, f: F) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| FcoError::Unavailable(format!("thread pool: {e}")))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads<F: FnOnce() -> Result<()> + Send>(n: usize, f: F) -> Result<()> {
    if n > 1 {
        log::warn!("built without the `parallel` feature; --jobs {n} runs on one thread");
    }
    f()
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Compare { files } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        return cmd_compare(files, &out);
    }
    let cfg = resolve_config(cli)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match cli.command {
        Command::Generate => cmd_generate(&cfg, &out),
        Command::Run => cmd_run(&cfg, &out, false),
        Command::Sweep => cmd_run(&cfg, &out, true),
        Command::EstimateConstants => cmd_estimate(&cfg, &out),
        Command::Compare { .. } => unreachable!(),
    }
}

/// Load the config and apply command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| FcoError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.trace {
        cfg.trace = t;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = cfg.dataset()?;
    store::write_atomic(&out.join("dataset.bin"), &store::encode_dataset(&ds))?;
    store::write_json(&out.join("dataset.json"), &DatasetSidecar::describe(&ds))?;
    log::info!("wrote dataset with {} clients to {}", ds.num_clients(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CellSummary<'a> {
    algorithm: &'a str,
    eta_c: f64,
    eta_s: f64,
    seed: u64,
    rounds: usize,
    #[serde(flatten)]
    status: &'a CellStatus,
    eval_points: usize,
    final_metrics: serde_json::Map<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<&'a report::CellDiagnostics>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_sha256: String,
    config: &'a ExperimentConfig,
    dataset: DatasetSidecar,
    regularizer: &'a Regularizer,
    constants: HeterogeneityStats,
    cells: Vec<CellSummary<'a>>,
}

#[derive(Serialize)]
struct Timing<'a> {
    total_s: f64,
    cells: Vec<(&'a str, f64, f64, f64)>,
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, sweep: bool) -> Result<()> {
    let start = Instant::now();
    let ds = cfg.dataset()?;
    let psi = cfg.regularizer_for(&ds);
    psi.validate()?;
    let cells = cfg.cells(&ds);
    for (_, hp) in &cells {
        hp.validate(ds.num_clients())?;
    }
    let target = cfg.run.target.clone().unwrap_or_else(|| default_target(ds.task()).to_string());
    let level = TraceLevel::from(cfg.trace);
    let exec = if sweep { Execution::Parallel } else { Execution::Sequential };
    let outcomes = report::run_grid(&ds, &psi, &cells, cfg.run.eval_every, level, exec)?;

    let hash = cfg.hash();
    store::write_atomic(&out.join("series.csv"), &report::series_csv(ds.task(), &outcomes, &hash)?)?;

    let est_batch = cfg.estimate.batch.unwrap_or(cfg.run.batch);
    let probes = default_probes(&ds, &psi, cfg.seed)?;
    let constants = estimate_constants(&ds, &probes, cfg.estimate.samples, est_batch, cfg.seed)?;
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let summary = RunSummary {
        config_sha256: hash,
        config: &echo,
        dataset: DatasetSidecar::describe(&ds),
        regularizer: &psi,
        constants,
        cells: outcomes
            .iter()
            .map(|o| CellSummary {
                algorithm: o.algorithm.name(),
                eta_c: o.hp.eta_c,
                eta_s: o.hp.eta_s,
                seed: o.hp.seed,
                rounds: o.hp.rounds,
                status: &o.status,
                eval_points: o.series.len(),
                final_metrics: o
                    .series
                    .last()
                    .map(|p| p.metrics.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect())
                    .unwrap_or_default(),
                diagnostics: o.diagnostics.as_ref(),
            })
            .collect(),
    };
    store::write_json(&out.join("summary.json"), &summary)?;

    if sweep {
        let lb = leaderboard(ds.task(), &target, cfg.run.rounds, &outcomes);
        if !outcomes.iter().any(|o| o.series.iter().any(|p| p.get(&target).is_some())) {
            return Err(FcoError::Config(format!("target metric {target:?} is not reported for this task")));
        }
        store::write_json(&out.join("leaderboard.json"), &lb)?;
    }
    let timing = Timing {
        total_s: start.elapsed().as_secs_f64(),
        cells: outcomes.iter().map(|o| (o.algorithm.name(), o.hp.eta_c, o.hp.eta_s, o.wall_time_s)).collect(),
    };
    store::write_json(&out.join("timing.json"), &timing)?;
    Ok(())
}

pub fn cmd_compare(files: &[PathBuf], out: &Path) -> Result<()> {
    let inputs =
        files.iter().map(|f| Ok((f.display().to_string(), report::read_series(f)?))).collect::<Result<Vec<_>>>()?;
    let cmp = report::compare(&inputs)?;
    store::write_atomic(&out.join("compare.csv"), &cmp.table)?;
    store::write_atomic(&out.join("deltas.csv"), &cmp.deltas)?;
    Ok(())
}

#[derive(Serialize)]
struct ConstantsReport<'a> {
    config_sha256: String,
    regularizer: &'a Regularizer,
    samples: usize,
    batch: usize,
    probes: usize,
    constants: HeterogeneityStats,
    reference_epochs: usize,
    reference_objective: f64,
    /// `‖w₀ − ŵ*‖₂` with `ŵ*` the reference solution.
    b_hat: f64,
}

pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = cfg.dataset()?;
    let psi = cfg.regularizer_for(&ds);
    let batch = cfg.estimate.batch.unwrap_or(cfg.run.batch);
    let probes = default_probes(&ds, &psi, cfg.seed)?;
    let constants = estimate_constants(&ds, &probes, cfg.estimate.samples, batch, cfg.seed)?;
    let (b_hat, w_star) = reference_distance(&ds, &psi, cfg.estimate.reference_epochs)?;
    let report = ConstantsReport {
        config_sha256: cfg.hash(),
        regularizer: &psi,
        samples: cfg.estimate.samples,
        batch,
        probes: probes.len(),
        constants,
        reference_epochs: cfg.estimate.reference_epochs,
        reference_objective: full_objective(&ds, &psi, &w_star)?,
        b_hat,
    };
    store::write_json(&out.join("constants.json"), &report)
}
