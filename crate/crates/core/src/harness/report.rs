//! Grid execution, long-format CSV series, leaderboards and comparisons.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algorithms::{run, Algorithm, EvalPoint, HyperParams, RunOptions, TraceLevel};
use crate::diagnostics::{dual_discrepancy, max_traced_gradient_norm, shadow_identity_residual};
use crate::error::{FcoError, Result};
use crate::exec::Execution;
use crate::problems::{FederatedDataset, Task};
use crate::regularizers::Regularizer;

pub const CSV_COLUMNS: [&str; 8] = ["task", "algorithm", "eta_c", "eta_s", "seed", "round", "metric", "value"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Diverged { round: usize },
    Unsupported { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub max_gradient_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shadow_identity_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dual_discrepancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discrepancy_envelope: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub status: CellStatus,
    pub series: Vec<EvalPoint>,
    pub diagnostics: Option<CellDiagnostics>,
    pub wall_time_s: f64,
}

pub fn run_cell(
    ds: &FederatedDataset,
    psi: &Regularizer,
    algorithm: Algorithm,
    hp: &HyperParams,
    eval_every: usize,
    level: TraceLevel,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let diagnostic = level == TraceLevel::Diagnostic;
    let opts = RunOptions { eval_every, level, keep_traces: diagnostic, ..RunOptions::default() };
    let (status, series, diagnostics) = match run(algorithm, ds, psi, hp, &opts) {
        Ok(res) => {
            let diag = if diagnostic { Some(cell_diagnostics(ds, algorithm, hp, &res.traces)?) } else { None };
            (CellStatus::Completed, res.series, diag)
        }
        Err(FcoError::Diverged { round }) => (CellStatus::Diverged { round }, Vec::new(), None),
        Err(FcoError::Unsupported(reason)) => (CellStatus::Unsupported { reason }, Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(CellOutcome {
        algorithm,
        hp: hp.clone(),
        status,
        series,
        diagnostics,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn cell_diagnostics(
    ds: &FederatedDataset,
    algorithm: Algorithm,
    hp: &HyperParams,
    traces: &[crate::algorithms::RoundTrace],
) -> Result<CellDiagnostics> {
    let max_gradient_norm = max_traced_gradient_norm(traces)?;
    let mut d = CellDiagnostics {
        max_gradient_norm,
        shadow_identity_residual: None,
        max_dual_discrepancy: None,
        discrepancy_envelope: None,
    };
    if algorithm.is_dual() {
        d.shadow_identity_residual = Some(shadow_identity_residual(traces, hp.eta_c)?);
        if hp.cohort == ds.num_clients() {
            let rep = dual_discrepancy(traces, ds.num_clients(), hp.eta_c, Some(max_gradient_norm), None)?;
            d.max_dual_discrepancy = Some(rep.max());
            d.discrepancy_envelope = Some(rep.bounded_gradient_envelope);
        }
    }
    Ok(d)
}

/// Run every cell, in parallel over cells when `exec` allows. Output order
/// is the input order regardless of scheduling.
pub fn run_grid(
    ds: &FederatedDataset,
    psi: &Regularizer,
    cells: &[(Algorithm, HyperParams)],
    eval_every: usize,
    level: TraceLevel,
    exec: Execution,
) -> Result<Vec<CellOutcome>> {
    exec.map(cells, |(alg, hp)| {
        let out = run_cell(ds, psi, *alg, hp, eval_every, level);
        if let Ok(o) = &out {
            log::info!("{} eta_c={} eta_s={}: {:?} in {:.2}s", alg, hp.eta_c, hp.eta_s, o.status, o.wall_time_s);
        }
        out
    })
    .into_iter()
    .collect()
}

/// Long-format series with a `#` comment line naming units and the config hash.
pub fn series_csv(task: Task, outcomes: &[CellOutcome], config_hash: &str) -> Result<Vec<u8>> {
    let mut buf = format!(
        "# units: round = completed communication rounds; value = metric in its natural units \
         (objective: F + psi; precision/recall/f1/density: fraction; rank: count; \
         frob_error: Frobenius norm; validation_mse: squared error); config_sha256 = {config_hash}\n"
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
        for o in outcomes {
            for p in &o.series {
                for (metric, value) in &p.metrics {
                    w.write_record([
                        task.name().to_string(),
                        o.algorithm.name().to_string(),
                        o.hp.eta_c.to_string(),
                        o.hp.eta_s.to_string(),
                        o.hp.seed.to_string(),
                        p.round.to_string(),
                        metric.clone(),
                        value.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
    }
    Ok(buf)
}

fn csv_err(e: csv::Error) -> FcoError {
    FcoError::Validation(format!("csv: {e}"))
}

/// Number of final evaluation points averaged by the sweep selection rule.
pub fn selection_window(rounds: usize) -> usize {
    (rounds / 5).clamp(1, 100)
}

/// Whether larger values of `metric` are better.
pub fn maximize(metric: &str) -> bool {
    matches!(metric, "f1" | "precision" | "recall")
}

pub fn default_target(task: Task) -> &'static str {
    match task {
        Task::Lasso => "f1",
        Task::LowRank => "frob_error",
        Task::Logistic => "objective",
    }
}

/// Mean of `metric` over the last `window` evaluation points.
pub fn window_score(series: &[EvalPoint], metric: &str, window: usize) -> Option<f64> {
    let values: Vec<f64> = series.iter().filter_map(|p| p.get(metric)).collect();
    if values.is_empty() {
        return None;
    }
    let tail = &values[values.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub algorithm: Algorithm,
    pub eta_c: f64,
    pub eta_s: f64,
    pub score: Option<f64>,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub task: Task,
    pub target: String,
    pub maximize: bool,
    pub window: usize,
    pub rounds: usize,
    /// Best cell per algorithm, in config order.
    pub best: Vec<LeaderboardEntry>,
    /// All cells per algorithm, best first; cells without a score rank last.
    pub ranking: BTreeMap<String, Vec<LeaderboardEntry>>,
}

pub fn leaderboard(task: Task, target: &str, rounds: usize, outcomes: &[CellOutcome]) -> Leaderboard {
    let window = selection_window(rounds);
    let max = maximize(target);
    let mut order: Vec<Algorithm> = Vec::new();
    let mut ranking: BTreeMap<String, Vec<LeaderboardEntry>> = BTreeMap::new();
    for o in outcomes {
        if !order.contains(&o.algorithm) {
            order.push(o.algorithm);
        }
        let score = window_score(&o.series, target, window).filter(|s| s.is_finite());
        ranking.entry(o.algorithm.name().to_string()).or_default().push(LeaderboardEntry {
            algorithm: o.algorithm,
            eta_c: o.hp.eta_c,
            eta_s: o.hp.eta_s,
            score,
            status: o.status.clone(),
        });
    }
    for entries in ranking.values_mut() {
        // Stable sort: ties keep grid order.
        entries.sort_by(|a, b| match (a.score, b.score) {
            (Some(x), Some(y)) if max => y.total_cmp(&x),
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
    }
    let best = order.iter().map(|a| ranking[a.name()][0].clone()).collect();
    Leaderboard { task, target: target.to_string(), maximize: max, window, rounds, best, ranking }
}

/// Metric name, then round, then value.
type MetricTable = BTreeMap<String, BTreeMap<usize, f64>>;

/// One row of a long-format series file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SeriesRow {
    pub task: String,
    pub algorithm: String,
    pub eta_c: f64,
    pub eta_s: f64,
    pub seed: u64,
    pub round: usize,
    pub metric: String,
    pub value: f64,
}

pub fn read_series(path: &Path) -> Result<Vec<SeriesRow>> {
    let file = std::fs::File::open(path)
        .map_err(|e| FcoError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<SeriesRow>, _>>()
        .map_err(|e| FcoError::Validation(format!("{}: {e}", path.display())))?;
    Ok(rows)
}

/// Per-round aligned table and final-value deltas against the first column.
pub struct Comparison {
    pub table: Vec<u8>,
    pub deltas: Vec<u8>,
}

pub fn compare(inputs: &[(String, Vec<SeriesRow>)]) -> Result<Comparison> {
    if inputs.is_empty() {
        return Err(FcoError::Validation("compare needs at least one series file".into()));
    }
    let mut task: Option<&str> = None;
    let mut rounds: Option<usize> = None;
    let mut columns: Vec<(String, MetricTable)> = Vec::new();
    for (i, (name, rows)) in inputs.iter().enumerate() {
        if rows.is_empty() {
            return Err(FcoError::Validation(format!("{name}: no series rows")));
        }
        for r in rows {
            match task {
                None => task = Some(&r.task),
                Some(t) if t != r.task => {
                    return Err(FcoError::Validation(format!("{name}: task {} does not match {t}", r.task)))
                }
                _ => {}
            }
        }
        let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
        match rounds {
            None => rounds = Some(last),
            Some(rr) if rr != last => {
                return Err(FcoError::Validation(format!("{name}: {last} rounds, expected {rr}")));
            }
            _ => {}
        }
        let mut per_cell: Vec<(String, MetricTable)> = Vec::new();
        for r in rows {
            let label = format!("{i}:{}(eta_c={},eta_s={},seed={})", r.algorithm, r.eta_c, r.eta_s, r.seed);
            let pos = match per_cell.iter().position(|(l, _)| *l == label) {
                Some(p) => p,
                None => {
                    per_cell.push((label, BTreeMap::new()));
                    per_cell.len() - 1
                }
            };
            per_cell[pos].1.entry(r.metric.clone()).or_default().insert(r.round, r.value);
        }
        columns.extend(per_cell);
    }
    let mut metrics: Vec<String> = Vec::new();
    for (_, m) in &columns {
        for k in m.keys() {
            if !metrics.contains(k) {
                metrics.push(k.clone());
            }
        }
    }
    metrics.sort();

    let mut table = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut table);
        let mut header = vec!["metric".to_string(), "round".to_string()];
        header.extend(columns.iter().map(|(l, _)| l.clone()));
        w.write_record(&header).map_err(csv_err)?;
        for metric in &metrics {
            let mut all_rounds: Vec<usize> =
                columns.iter().filter_map(|(_, m)| m.get(metric)).flat_map(|s| s.keys().copied()).collect();
            all_rounds.sort_unstable();
            all_rounds.dedup();
            for r in all_rounds {
                let mut rec = vec![metric.clone(), r.to_string()];
                for (_, m) in &columns {
                    rec.push(m.get(metric).and_then(|s| s.get(&r)).map(|v| v.to_string()).unwrap_or_default());
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
    }

    let mut deltas = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut deltas);
        w.write_record(["metric", "column", "final_round", "final_value", "delta_vs_first"]).map_err(csv_err)?;
        for metric in &metrics {
            let finals: Vec<Option<(usize, f64)>> = columns
                .iter()
                .map(|(_, m)| m.get(metric).and_then(|s| s.iter().next_back()).map(|(r, v)| (*r, *v)))
                .collect();
            let base = finals[0].map(|(_, v)| v);
            for ((label, _), fin) in columns.iter().zip(&finals) {
                let Some((r, v)) = fin else { continue };
                let delta = base.map(|b| (v - b).to_string()).unwrap_or_default();
                w.write_record([metric.clone(), label.clone(), r.to_string(), v.to_string(), delta])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(Comparison { table, deltas })
}
