//! `gen-data`, `train`, `eval` and `gradcheck`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use pon_core::data::{load_csv, save_csv, SyntheticConfig};
use pon_core::gradcheck::{self, GradcheckOptions, GradcheckReport};
use pon_core::metrics::EvalReport;
use pon_core::nn::{evaluate_network, Checkpoint, EpochRecord, Trainer};
use pon_core::{Dataset, PonError};

use crate::config::{write_json, DataSource, RunConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the synthetic dataset to `out` and its generator config beside it.
pub fn gen_data(config: &RunConfig, out: &Path) -> CliResult<Dataset> {
    let synthetic: &SyntheticConfig = match &config.data {
        DataSource::Synthetic(cfg) => cfg,
        DataSource::Csv(_) => {
            return Err(CliError::Validation(
                "gen-data needs a synthetic data section".into(),
            ))
        }
    };
    synthetic.validate()?;
    let dataset = pon_core::data::generate(synthetic)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_csv(&dataset, out)?;
    write_json(&out.with_extension("config.json"), config)?;
    info!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(dataset)
}

fn append_history(path: &Path, resume: bool) -> CliResult<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    Ok(BufWriter::new(file))
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Trains on the configured data, optionally resuming from a checkpoint.
///
/// History lines are flushed as each epoch finishes, so a divergence leaves
/// every completed epoch on disk.
pub fn train(
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    validation: Option<&Path>,
) -> CliResult<TrainOutcome> {
    config.validate()?;
    let data = config.data.load()?;
    let validation = validation
        .map(|p| load_csv(p, Some(data.num_classes())))
        .transpose()?;
    create_dir(out_dir)?;
    config.write_to(out_dir)?;

    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            ckpt.train.epochs = config.train.epochs;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(&data, &config.model, &config.train, &config.method)?,
    };
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_out = append_history(&history_path, resume.is_some())?;
    let history = trainer.fit(&data, validation.as_ref(), |record| {
        let line = serde_json::to_string(record)?;
        writeln!(history_out, "{line}")
            .and_then(|_| history_out.flush())
            .map_err(|e| PonError::Io {
                path: history_path.clone(),
                source: e,
            })?;
        info!(
            "epoch {}: classification {:.5}, contrastive {:.5}, train acc {:.4}",
            record.epoch, record.loss_pfl, record.loss_mcl, record.train_acc
        );
        Ok(())
    })?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainOutcome {
        history,
        checkpoint,
    })
}

/// Evaluates a checkpoint on a CSV file or on the configured data.
pub fn eval(config: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> CliResult<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = match data {
        Some(path) => load_csv(path, None)?,
        None => config.data.load()?,
    };
    if dataset.num_classes() != ckpt.network.num_classes {
        return Err(CliError::Validation(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.network.num_classes,
            dataset.num_classes()
        )));
    }
    if dataset.feature_dim() != ckpt.network.input_dim() {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} features, dataset has {}",
            ckpt.network.input_dim(),
            dataset.feature_dim()
        )));
    }
    Ok(evaluate_network(
        &ckpt.network,
        &dataset,
        config.eval.thresholds,
    )?)
}

/// Serializes a report exactly as written to disk.
pub fn report_json(report: &EvalReport) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(report).map_err(PonError::from)? + "\n")
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Headline metrics and operating points, in percent.
pub fn eval_table(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<8} {:>8} {:>8} {:>8}\n{:<8} {:>8} {:>8} {:>8}\n\n",
        "Acc",
        "AUC",
        "QWK",
        "F1",
        percent(Some(report.acc)),
        percent(report.macro_auc),
        percent(Some(report.qwk)),
        percent(Some(report.macro_f1)),
    );
    out += &format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
        "task", "sen@spec80", "spec@sen80", "sen@spec90", "spec@sen90"
    );
    for (name, p) in [
        ("primary", &report.primary),
        ("secondary", &report.secondary),
    ] {
        out += &format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
            name,
            percent(p.sen_at_spec80),
            percent(p.spec_at_sen80),
            percent(p.sen_at_spec90),
            percent(p.spec_at_sen90)
        );
    }
    out
}

pub fn gradcheck(options: &GradcheckOptions) -> CliResult<GradcheckReport> {
    Ok(gradcheck::run(options)?)
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut out = format!(
        "{:<20} {:>8} {:>14}  status\n",
        "component", "configs", "max rel err"
    );
    for c in &report.components {
        out += &format!(
            "{:<20} {:>8} {:>14.3e}  {}\n",
            c.component,
            c.configurations,
            c.max_relative_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    out
}
