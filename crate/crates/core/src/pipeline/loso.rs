use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{compute_metrics, from_confusion, pool_confusion, Metrics};
use super::model::ModelConfig;
use super::train::{EpochLog, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Model and training settings of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// The published architecture and hyperparameters.
    pub fn published() -> Self {
        Self::default()
    }

    /// A reduced model that trains a full LOSO run on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.dgm.widths = vec![8, 16, 32, 64];
        c.model.fusion.embed_dim = 64;
        c.model.fusion.heads = 8;
        c.model.fusion.depth = 1;
        c.model.region_size = 30;
        c.model.patch_size = 6;
        c.train.batch_size = 8;
        c.train.epochs = 5;
        c.train.fusion_lr = 2e-3;
        c.train.self_supervised_pairs = 4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "published" => Ok(Self::published()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::usage(format!("unknown preset {name:?}; expected published or desk"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Outcome of training on all subjects but one and testing on that one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject: String,
    pub seed: u64,
    pub train_samples: usize,
    pub test_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub metrics: Metrics,
    pub epochs: Vec<EpochLog>,
}

/// Leave-one-subject-out evaluation. Aggregate metrics pool the confusion
/// matrices of all folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldReport>,
    pub aggregate: Metrics,
    pub per_domain: BTreeMap<String, Metrics>,
}

impl LosoReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Seed of fold `k` derived from the experiment seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Run LOSO over the subjects of `data`, optionally only the first `max_folds`
/// folds. `progress` is called after every fold.
pub fn run_loso<T: Real>(
    data: &Dataset<T>,
    config: &ExperimentConfig,
    max_folds: Option<usize>,
    mut progress: impl FnMut(&FoldReport),
) -> Result<LosoReport> {
    config.validate()?;
    let classes = config.model.fusion.num_classes;
    let mut folds = Vec::new();
    for (k, fold) in data.loso_split()?.into_iter().enumerate().take(max_folds.unwrap_or(usize::MAX)) {
        let mut train = config.train.clone();
        train.seed = fold_seed(config.train.seed, k);
        let mut trainer = Trainer::<T>::new(config.model.clone(), train.clone())?;
        let epochs = trainer.fit(data, &fold.train)?;
        let results = trainer.predict(data, &fold.test)?;
        let predictions: Vec<usize> = results.iter().map(|r| r.label).collect();
        let labels = data.labels(&fold.test);
        let report = FoldReport {
            subject: fold.subject,
            seed: train.seed,
            train_samples: fold.train.len(),
            test_ids: fold.test.iter().map(|&i| data.samples[i].id.clone()).collect(),
            metrics: compute_metrics(&predictions, &labels, classes)?,
            probabilities: results.into_iter().map(|r| r.probs).collect(),
            labels,
            predictions,
            epochs,
        };
        progress(&report);
        folds.push(report);
    }
    let aggregate = from_confusion(pool_confusion(folds.iter().map(|f| &f.metrics.confusion), classes));
    let mut by_domain: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let domain_of: BTreeMap<&str, &str> = data.samples.iter().map(|s| (s.id.as_str(), s.domain.as_str())).collect();
    for f in &folds {
        for ((id, &p), &t) in f.test_ids.iter().zip(&f.predictions).zip(&f.labels) {
            let entry = by_domain.entry(domain_of[id.as_str()].to_string()).or_default();
            entry.0.push(p);
            entry.1.push(t);
        }
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(d, (p, t))| Ok((d, compute_metrics(&p, &t, classes)?)))
        .collect::<Result<_>>()?;
    Ok(LosoReport { config: config.clone(), folds, aggregate, per_domain })
}
