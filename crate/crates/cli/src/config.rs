use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mexp_core::fusion::FusionVariant;
use mexp_core::pipeline::{Ablation, ExperimentConfig, RegionMode};
use mexp_core::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegionsArg {
    Au,
    Grid3x3,
}

/// Run file: an optional preset, the dataset, and `[model]` / `[train]`
/// tables overriding the preset field by field.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    preset: Option<String>,
    dataset: Option<PathBuf>,
    precision: Option<Precision>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
}

/// Flags shared by the commands that build a model.
#[derive(Debug, Default, Args)]
pub struct ExperimentArgs {
    /// Run file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: published or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset manifest (CSV).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Ablation variant M0..M9.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub regions: Option<RegionsArg>,
    #[arg(long)]
    pub no_self_supervised: bool,
    #[arg(long)]
    pub no_fullface: bool,
    #[arg(long)]
    pub no_local: bool,
    #[arg(long)]
    pub no_global: bool,
}

/// Fully resolved run settings.
#[derive(Debug)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub dataset: Option<PathBuf>,
    pub precision: Precision,
}

impl RunConfig {
    pub fn dataset(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| Error::Usage("no dataset given (--dataset or `dataset` in the run file)".into()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let (file, dir) = match &self.config {
            Some(p) => {
                let file: RunFile = toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (RunFile::default(), PathBuf::new()),
        };
        let preset = self.preset.as_deref().or(file.preset.as_deref()).unwrap_or("published");
        let mut table: toml::Table =
            toml::from_str(&ExperimentConfig::preset(preset)?.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        let mut over = toml::Table::new();
        over.insert("model".into(), toml::Value::Table(file.model));
        over.insert("train".into(), toml::Value::Table(file.train));
        merge(&mut table, over);
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let mut experiment = ExperimentConfig::from_toml(&text)?;

        let mut self_supervised = experiment.train.self_supervised;
        if let Some(a) = &self.ablation {
            Ablation::parse(a)?.apply(&mut experiment.model, &mut self_supervised);
        }
        if let Some(f) = self.fusion {
            experiment.model.fusion.variant = match f {
                FusionArg::Before => FusionVariant::Before,
                FusionArg::After => FusionVariant::After,
            };
        }
        if let Some(r) = self.regions {
            experiment.model.regions = match r {
                RegionsArg::Au => RegionMode::Au,
                RegionsArg::Grid3x3 => RegionMode::Grid3x3,
            };
        }
        let switches = &mut experiment.model.switches;
        switches.full_face &= !self.no_fullface;
        switches.local &= !self.no_local;
        switches.global &= !self.no_global;
        experiment.train.self_supervised = self_supervised && !self.no_self_supervised;
        if let Some(s) = self.seed {
            experiment.train.seed = s;
        }
        experiment.validate()?;
        let dataset = self.dataset.clone().or_else(|| file.dataset.map(|d| if d.is_absolute() { d } else { dir.join(d) }));
        Ok(RunConfig { experiment, dataset, precision: self.precision.or(file.precision).unwrap_or_default() })
    }
}
