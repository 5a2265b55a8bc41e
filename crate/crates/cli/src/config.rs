//! Run configuration: JSON file, then command-line overrides, over defaults.

use std::path::{Path, PathBuf};

use pon_core::data::{generate, load_csv, SyntheticConfig};
use pon_core::metrics::SignificanceThresholds;
use pon_core::nn::{Method, MethodSpec, ModelConfig, Toggles, TrainConfig};
use pon_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Inferred from the largest label when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> CliResult<Dataset> {
        Ok(match self {
            DataSource::Synthetic(cfg) => generate(cfg)?,
            DataSource::Csv(src) => load_csv(&src.path, src.num_classes)?,
        })
    }
}

/// Cross-validation protocol and the rows of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Number of seeds; run `r` uses seed `train.seed + r` for splits and training.
    pub repeats: usize,
    pub thresholds: SignificanceThresholds,
    /// Methods compared by `compare`.
    pub compare: Vec<MethodSpec>,
}

/// The method rows of the main comparison table, proposed method last.
pub fn method_rows() -> Vec<MethodSpec> {
    [
        Method::Ce,
        Method::Focal,
        Method::Ordinal,
        Method::Softlabel,
        Method::Emd,
        Method::Pon,
    ]
    .into_iter()
    .map(MethodSpec::new)
    .collect()
}

/// CE baseline plus the five component-ablation rows.
pub fn ablation_rows() -> Vec<MethodSpec> {
    let t = |poisson_head, poisson_encoding, pfl, mcl| {
        MethodSpec::pon(Toggles {
            poisson_head,
            poisson_encoding,
            pfl,
            mcl,
        })
    };
    vec![
        MethodSpec::new(Method::Ce),
        t(true, false, false, false),
        t(true, true, false, false),
        t(true, true, true, false),
        t(false, false, false, true),
        t(true, true, true, true),
    ]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            repeats: 5,
            thresholds: SignificanceThresholds::default(),
            compare: method_rows(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub method: MethodSpec,
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Validation(m) => {
                        CliError::Validation(format!("{}: {m}", p.display()))
                    }
                    other => other,
                })
            }
        }
    }

    /// `--seed` sets the training seed and, for synthetic data, the generator seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            if let DataSource::Synthetic(cfg) = &mut self.data {
                cfg.seed = seed;
            }
        }
        if let Some(m) = o.method {
            self.method = MethodSpec {
                name: m,
                ..self.method
            };
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if let DataSource::Synthetic(cfg) = &self.data {
            cfg.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.folds < 2 {
            return Err(CliError::Validation("eval.folds must be at least 2".into()));
        }
        if self.eval.repeats == 0 {
            return Err(CliError::Validation(
                "eval.repeats must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn write_to(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join("config.json"), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(pon_core::PonError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
