//! Datasets: a synthetic latent-severity generator, CSV interchange and
//! stratified k-fold splits.
//!
//! The generator draws a continuous severity `s ~ U[0, K]`, discretizes it into
//! ordinal classes at fixed thresholds, then corrupts the severity with
//! `N(0, σ_s²)` before embedding it along a fixed random unit direction with
//! isotropic `N(0, σ_x²)` feature noise. `σ_s` controls intra-class spread.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};
use crate::poisson::ClassLabel;
use crate::SampleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of the severity corruption (`σ_s`).
    pub severity_noise: f64,
    /// Standard deviation of the isotropic feature noise (`σ_x`).
    pub feature_noise: f64,
    /// `K − 1` increasing cut points on `[0, K]`; equal-width when absent.
    pub thresholds: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 2000,
            num_classes: 5,
            feature_dim: 8,
            severity_noise: 0.5,
            feature_noise: 0.25,
            thresholds: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PonError::Config("num_classes must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(PonError::Config("feature_dim must be positive".into()));
        }
        for (name, v) in [
            ("severity_noise", self.severity_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PonError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        let t = self.resolved_thresholds();
        if t.len() != self.num_classes - 1 {
            return Err(PonError::Config(format!(
                "expected {} thresholds, got {}",
                self.num_classes - 1,
                t.len()
            )));
        }
        if t.iter().any(|x| !x.is_finite()) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PonError::Config(
                "thresholds must be finite and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_thresholds(&self) -> Vec<f64> {
        self.thresholds
            .clone()
            .unwrap_or_else(|| (1..self.num_classes).map(|k| k as f64).collect())
    }

    /// Class index of a latent severity.
    pub fn discretize(&self, severity: f64) -> usize {
        self.resolved_thresholds()
            .partition_point(|&t| t <= severity)
    }
}

/// Labelled feature rows with stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<ClassLabel>,
    ids: Vec<SampleId>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        ids: Vec<SampleId>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() || labels.len() != ids.len() {
            return Err(PonError::invalid(
                "features, labels and ids differ in length",
            ));
        }
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|row| row.len() != dim) {
            return Err(PonError::invalid("feature rows differ in length"));
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(PonError::invalid("non-finite feature value"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(PonError::invalid(format!("duplicate sample id {dup}")));
        }
        let labels = labels
            .into_iter()
            .map(|y| ClassLabel::new(y, num_classes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            features,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    /// Rows with the given ids, in the given order.
    pub fn subset(&self, ids: &[SampleId]) -> Result<Dataset> {
        let index: HashMap<SampleId, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut out = Dataset {
            features: Vec::with_capacity(ids.len()),
            labels: Vec::with_capacity(ids.len()),
            ids: Vec::with_capacity(ids.len()),
            num_classes: self.num_classes,
        };
        for id in ids {
            let &i = index
                .get(id)
                .ok_or_else(|| PonError::invalid(format!("unknown sample id {id}")))?;
            out.features.push(self.features[i].clone());
            out.labels.push(self.labels[i]);
            out.ids.push(*id);
        }
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }
}

/// Random unit vector carrying the severity signal for `config`.
pub fn signal_direction(config: &SyntheticConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    loop {
        let v: Vec<f64> = (0..config.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a synthetic ordinal dataset.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let direction = signal_direction(config);
    let thresholds = config.resolved_thresholds();
    let k = config.num_classes as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut features = Vec::with_capacity(config.num_samples);
    let mut labels = Vec::with_capacity(config.num_samples);
    for _ in 0..config.num_samples {
        let severity = rng.random_range(0.0..k);
        labels.push(thresholds.partition_point(|&t| t <= severity));
        let corrupted = severity + config.severity_noise * rng.sample::<f64, _>(StandardNormal);
        let row = direction
            .iter()
            .map(|&u| u * corrupted + config.feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        features.push(row);
    }
    let ids = (0..config.num_samples as SampleId).collect();
    Dataset::new(features, labels, ids, config.num_classes)
}

/// Writes `id,label,f0,…` rows with 17 significant digits per feature.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| PonError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| PonError::invalid(format!("writing {}: {e}", path.display()));
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dataset.feature_dim()).map(|j| format!("f{j}")));
    writer.write_record(&header).map_err(csv_err)?;
    for ((id, label), row) in dataset
        .ids
        .iter()
        .zip(&dataset.labels)
        .zip(&dataset.features)
    {
        let mut record = vec![id.to_string(), label.index().to_string()];
        record.extend(row.iter().map(|x| format!("{x:.16e}")));
        writer.write_record(&record).map_err(csv_err)?;
    }
    let mut file = writer
        .into_inner()
        .map_err(|e| PonError::invalid(format!("flushing {}: {e}", path.display())))?;
    file.flush().map_err(|e| PonError::io(path, e))
}

/// Reads a dataset written by [`save_csv`].
///
/// With `num_classes = None` the class count is inferred as `max label + 1`
/// (at least 2); otherwise labels at or above it are rejected.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| PonError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| PonError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(PonError::EmptyDataset);
    }
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(PonError::Parse {
            line: 1,
            message: "header must start with `id,label,f0`".into(),
        });
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(PonError::Parse {
                line: 1,
                message: format!("expected column f{j}, found `{name}`"),
            });
        }
    }
    let dim = header.len() - 2;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| PonError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(PonError::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let id: SampleId = record[0].trim().parse().map_err(|_| PonError::Parse {
            line,
            message: format!("invalid id `{}`", &record[0]),
        })?;
        let raw_label: i64 = record[1].trim().parse().map_err(|_| PonError::Parse {
            line,
            message: format!("invalid label `{}`", &record[1]),
        })?;
        if raw_label < 0 {
            return Err(PonError::Validation {
                line,
                message: format!("negative label {raw_label} for sample {id}"),
            });
        }
        let row = record
            .iter()
            .skip(2)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| PonError::Parse {
                        line,
                        message: format!("invalid feature `{f}`"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if ids.contains(&id) {
            return Err(PonError::Validation {
                line,
                message: format!("duplicate sample id {id}"),
            });
        }
        ids.push(id);
        labels.push(raw_label as usize);
        features.push(row);
        lines.push(line);
    }
    if labels.is_empty() {
        return Err(PonError::EmptyDataset);
    }
    let inferred = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let k = num_classes.unwrap_or(inferred);
    if let Some(pos) = labels.iter().position(|&y| y >= k) {
        return Err(PonError::Validation {
            line: lines[pos],
            message: format!("label {} outside 0..{k}", labels[pos]),
        });
    }
    Dataset::new(features, labels, ids, k)
}

/// One cross-validation split, as sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<SampleId>,
    pub validation: Vec<SampleId>,
}

/// Stratified k-fold partition.
///
/// Each class is shuffled with the seed and the classes are dealt round-robin
/// into folds, so fold sizes differ by at most one and every class is spread
/// within one sample of its global share.
pub fn kfold_split(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(PonError::Config(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > dataset.len() {
        return Err(PonError::Config(format!(
            "{folds} folds exceed {} samples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<SampleId>> = vec![Vec::new(); dataset.num_classes];
    for (id, label) in dataset.ids.iter().zip(&dataset.labels) {
        by_class[label.index()].push(*id);
    }
    let mut order = Vec::with_capacity(dataset.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < folds {
            warn!(
                "class {class} has {} samples for {folds} folds; some folds will lack it",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        order.extend(members.iter().copied());
    }
    let mut validation = vec![Vec::new(); folds];
    for (pos, id) in order.iter().enumerate() {
        validation[pos % folds].push(*id);
    }
    Ok(validation
        .iter()
        .enumerate()
        .map(|(f, val)| Fold {
            train: validation
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect(),
            validation: val.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_samples: 100,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small(7)).unwrap(), generate(&small(7)).unwrap());
        assert_ne!(generate(&small(7)).unwrap(), generate(&small(8)).unwrap());
    }

    #[test]
    fn noiseless_data_is_threshold_separable() {
        let cfg = SyntheticConfig {
            num_samples: 500,
            severity_noise: 0.0,
            feature_noise: 0.0,
            ..SyntheticConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = signal_direction(&cfg);
        for (row, label) in data.features().iter().zip(data.labels()) {
            let s: f64 = row.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert_eq!(cfg.discretize(s), label.index());
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = SyntheticConfig {
            thresholds: Some(vec![1.0, 1.0, 2.0, 3.0]),
            ..SyntheticConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.thresholds = Some(vec![1.0, 2.0]);
        assert!(cfg.validate().is_err());
        cfg.thresholds = None;
        cfg.severity_noise = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = generate(&small(3)).unwrap();
        save_csv(&data, &path).unwrap();
        let back = load_csv(&path, Some(5)).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn csv_rejects_negative_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,label,f0\n0,1,0.5\n1,-1,0.25\n").unwrap();
        match load_csv(&path, None) {
            Err(PonError::Validation { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("-1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_out_of_range_and_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,label,f0\n0,1,0.5\n1,5,0.25\n").unwrap();
        assert!(matches!(
            load_csv(&path, Some(5)),
            Err(PonError::Validation { line: 3, .. })
        ));
        std::fs::write(&path, "id,label,f0\n0,1,abc\n").unwrap();
        assert!(matches!(
            load_csv(&path, None),
            Err(PonError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path, None), Err(PonError::EmptyDataset)));
        std::fs::write(&path, "id,label,f0\n").unwrap();
        assert!(matches!(load_csv(&path, None), Err(PonError::EmptyDataset)));
    }

    #[test]
    fn folds_partition_and_stratify() {
        let data = generate(&small(11)).unwrap();
        let folds = kfold_split(&data, 5, 42).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<SampleId> = Vec::new();
        let global = data.class_counts();
        for fold in &folds {
            assert_eq!(fold.validation.len(), 20);
            assert_eq!(fold.train.len(), 80);
            all.extend(&fold.validation);
            let sub = data.subset(&fold.validation).unwrap();
            for (c, &n) in sub.class_counts().iter().enumerate() {
                let share = global[c] as f64 / 5.0;
                assert!((n as f64 - share).abs() <= 1.0, "class {c}: {n} vs {share}");
            }
        }
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(folds, kfold_split(&data, 5, 42).unwrap());
        assert!(kfold_split(&data, 1, 0).is_err());
        assert!(kfold_split(&data, 101, 0).is_err());
    }
}
