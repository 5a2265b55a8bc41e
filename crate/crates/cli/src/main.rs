use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pon_cli::commands::{self, REPORT_FILE};
use pon_cli::config::write_json;
use pon_cli::{ablation_rows, compare, CliError, CliResult, Overrides, RunConfig};
use pon_core::gradcheck::GradcheckOptions;
use pon_core::nn::{Method, MethodSpec};

#[derive(Parser)]
#[command(
    name = "pon",
    version,
    about = "Train and evaluate Poisson-head ordinal classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the training seed and the synthetic data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref())?;
        config.apply(&Overrides {
            seed: self.seed,
            method: self.method,
            epochs: self.epochs,
        });
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data.csv")]
        out: PathBuf,
    },
    /// Train one model and save its checkpoint and per-epoch history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// CSV scored after every epoch.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Score a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV to score; defaults to the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        configurations: usize,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
    /// Cross-validated comparison of several methods.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names; defaults to the configured rows.
        #[arg(long, value_delimiter = ',', conflicts_with = "ablation")]
        methods: Option<Vec<Method>>,
        /// Run the component ablation rows instead.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let data = commands::gen_data(&common.resolve()?, &out)?;
            println!(
                "{} samples, {} classes -> {}",
                data.len(),
                data.num_classes(),
                out.display()
            );
        }
        Command::Train {
            common,
            out,
            resume,
            validation,
        } => {
            let config = common.resolve()?;
            let outcome = commands::train(&config, &out, resume.as_deref(), validation.as_deref())?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "epoch {}: loss {:.5} + {:.5}, train acc {:.4}",
                    last.epoch, last.loss_pfl, last.loss_mcl, last.train_acc
                );
            }
            println!("checkpoint -> {}", outcome.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let config = common.resolve()?;
            let report = commands::eval(&config, &checkpoint, data.as_deref())?;
            create_dir(&out)?;
            config.write_to(&out)?;
            let text = commands::report_json(&report)?;
            let path = out.join(REPORT_FILE);
            std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
            print!("{}", commands::eval_table(&report));
        }
        Command::Gradcheck {
            config,
            seed,
            configurations,
            out,
        } => {
            let run_config = RunConfig::load(config.as_deref())?;
            let options = GradcheckOptions {
                configurations,
                seed,
                ..GradcheckOptions::default()
            };
            let report = commands::gradcheck(&options)?;
            create_dir(&out)?;
            run_config.write_to(&out)?;
            write_json(&out.join("gradcheck.json"), &report)?;
            print!("{}", commands::gradcheck_table(&report));
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|c| c.component.as_str()).collect();
                return Err(CliError::Runtime(format!(
                    "gradient check failed: {}",
                    names.join(", ")
                )));
            }
        }
        Command::Compare {
            common,
            methods,
            ablation,
            folds,
            repeats,
            out,
        } => {
            let mut config = common.resolve()?;
            if let Some(f) = folds {
                config.eval.folds = f;
            }
            if let Some(r) = repeats {
                config.eval.repeats = r;
            }
            let rows = if ablation {
                ablation_rows()
            } else if let Some(m) = methods {
                m.into_iter().map(MethodSpec::new).collect()
            } else {
                config.eval.compare.clone()
            };
            let report = compare::compare(&config, &rows)?;
            compare::write_outputs(&config, &report, &out)?;
            print!("{}", pon_cli::format_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
