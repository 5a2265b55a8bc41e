//! Cross-validated comparison of methods, repeated over seeds.

use std::path::Path;

use log::{info, warn};
use pon_core::data::kfold_split;
use pon_core::nn::{train, MethodSpec, TrainConfig};
use pon_core::Dataset;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{write_json, RunConfig};
use crate::error::{CliError, CliResult};

/// Environment variable capping harness threads.
pub const THREADS_VAR: &str = "PON_THREADS";

/// Metrics of one (method, seed, fold) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub fold: usize,
    pub acc: f64,
    pub macro_auc: Option<f64>,
    pub qwk: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub method: MethodSpec,
    /// First error when any run of this row failed.
    pub error: Option<String>,
    pub acc: Option<Summary>,
    pub macro_auc: Option<Summary>,
    pub qwk: Option<Summary>,
    pub macro_f1: Option<Summary>,
    pub runs: Vec<RunMetrics>,
}

impl Row {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub rows: Vec<Row>,
}

impl CompareReport {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn run_one(
    data: &Dataset,
    config: &RunConfig,
    method: &MethodSpec,
    seed: u64,
    fold: usize,
) -> CliResult<RunMetrics> {
    let split = &kfold_split(data, config.eval.folds, seed)?[fold];
    let train_set = data.subset(&split.train)?;
    let val_set = data.subset(&split.validation)?;
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let out = train(&train_set, None, &config.model, &train_cfg, method)?;
    let report = pon_core::nn::evaluate_network(&out.network, &val_set, config.eval.thresholds)?;
    Ok(RunMetrics {
        seed,
        fold,
        acc: report.acc,
        macro_auc: report.macro_auc,
        qwk: report.qwk,
        macro_f1: report.macro_f1,
    })
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Validation(format!(
                "{THREADS_VAR} must be a positive integer, got `{v}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

/// Runs every `(row, seed, fold)` job. Each job is single-threaded and fully
/// determined by its seed, so the thread count does not affect results.
pub fn compare(config: &RunConfig, rows: &[MethodSpec]) -> CliResult<CompareReport> {
    config.validate()?;
    if rows.is_empty() {
        return Err(CliError::Validation("no methods to compare".into()));
    }
    let data = config.data.load()?;
    let seeds: Vec<u64> = (0..config.eval.repeats as u64)
        .map(|r| config.train.seed + r)
        .collect();
    let jobs: Vec<(usize, u64, usize)> = (0..rows.len())
        .flat_map(|r| {
            seeds
                .iter()
                .flat_map(move |&s| (0..config.eval.folds).map(move |f| (r, s, f)))
        })
        .collect();
    info!("running {} jobs", jobs.len());
    let results: Vec<CliResult<RunMetrics>> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(r, seed, fold)| run_one(&data, config, &rows[r], seed, fold))
            .collect()
    });

    let per_row = seeds.len() * config.eval.folds;
    let rows = rows
        .iter()
        .zip(results.chunks(per_row))
        .map(|(method, results)| summarize(method, results))
        .collect();
    Ok(CompareReport {
        folds: config.eval.folds,
        seeds,
        epochs: config.train.epochs,
        rows,
    })
}

/// Aggregates one row; any failed run marks the whole row failed.
fn summarize(method: &MethodSpec, results: &[CliResult<RunMetrics>]) -> Row {
    let error = results
        .iter()
        .find_map(|r| r.as_ref().err().map(|e| e.to_string()));
    if let Some(e) = &error {
        warn!("{} failed: {e}", method.label());
    }
    let runs: Vec<RunMetrics> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().copied())
        .collect();
    let ok = error.is_none();
    let summary = |values: Vec<f64>| if ok { Summary::of(&values) } else { None };
    let aucs: Option<Vec<f64>> = runs.iter().map(|r| r.macro_auc).collect();
    Row {
        label: method.label(),
        method: *method,
        acc: summary(runs.iter().map(|r| r.acc).collect()),
        macro_auc: aucs.and_then(summary),
        qwk: summary(runs.iter().map(|r| r.qwk).collect()),
        macro_f1: summary(runs.iter().map(|r| r.macro_f1).collect()),
        error,
        runs,
    }
}

fn cell(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.sd),
        None => "-".to_string(),
    }
}

/// Fixed-width table with percentages to two decimals.
pub fn format_table(report: &CompareReport) -> String {
    let header = ["Method", "Acc", "AUC", "QWK", "F1"];
    let mut lines: Vec<[String; 5]> = vec![header.map(String::from)];
    for row in &report.rows {
        if row.failed() {
            let failed = "failed".to_string();
            lines.push([
                row.label.clone(),
                failed.clone(),
                failed.clone(),
                failed.clone(),
                failed,
            ]);
        } else {
            lines.push([
                row.label.clone(),
                cell(row.acc),
                cell(row.macro_auc),
                cell(row.qwk),
                cell(row.macro_f1),
            ]);
        }
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| {
            lines
                .iter()
                .map(|l| l[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let mut text = format!("{:<w$}", line[0], w = widths[0]);
        for c in 1..5 {
            let pad = widths[c] - line[c].chars().count();
            text += &format!("  {}{}", " ".repeat(pad), line[c]);
        }
        out += text.trim_end();
        out.push('\n');
        if i == 0 {
            out += &"-".repeat(widths.iter().sum::<usize>() + 8);
            out.push('\n');
        }
    }
    out
}

/// Writes `compare.json`, `table.txt` and the resolved config into `out_dir`.
pub fn write_outputs(config: &RunConfig, report: &CompareReport, out_dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    config.write_to(out_dir)?;
    write_json(&out_dir.join("compare.json"), report)?;
    let table = out_dir.join("table.txt");
    std::fs::write(&table, format_table(report)).map_err(|e| CliError::io(&table, e))
}
