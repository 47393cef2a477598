//! Declarative run configuration (TOML) with dotted-path overrides.
//!
//! ```toml
//! version = 1
//!
//! [data]
//! seed = 0
//! split = [0.8, 0.1, 0.1]
//! forget_fraction = 0.025
//! [data.synthetic]
//! n_subjects = 400
//! examples_per_subject = [3, 7]
//! num_classes = 10
//! feature_dim = 16
//! imbalance_exponent = 0.5
//!
//! [model]
//! hidden = [32]
//!
//! [experiment]
//! n = 64
//! experiments = 5
//! setup = "reuse_n_n"
//!
//! [unlearn]
//! algorithm = "finetune"
//! ```
//!
//! `[unlearn]` holds exactly one of `algorithm` (a preset, `identity` or
//! `retrain_oracle`), `stitch = { erase = "...", repair = "..." }` or an
//! inline `[unlearn.pipeline]`. Relative paths resolve against the directory
//! of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::EpsilonConfig;
use crate::data::{generate_synthetic, load_csv, make_splits, Dataset, SyntheticSpec};
use crate::harness::{ExperimentConfig, Problem, SetupKind};
use crate::nn::Architecture;
use crate::scoring::BinningConfig;
use crate::train::TrainConfig;
use crate::unlearn::{resolve_pipeline, stitch, PipelineSpec};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_forget() -> f64 {
    0.025
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// CSV file with header `subject_id,label,f1,...`.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Fraction of training subjects moved to the forget set.
    #[serde(default = "default_forget")]
    pub forget_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
}

fn default_experiments() -> usize {
    20
}
fn default_budget() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub n: usize,
    #[serde(default = "default_experiments")]
    pub experiments: usize,
    pub setup: SetupKind,
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_budget")]
    pub budget_fraction: f64,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchConfig {
    pub erase: String,
    pub repair: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    #[serde(default)]
    pub algorithm: Option<String>,
    #[serde(default)]
    pub stitch: Option<StitchConfig>,
    #[serde(default)]
    pub pipeline: Option<PipelineSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Model store directory.
    #[serde(default)]
    pub store: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub epsilon: EpsilonConfig,
    #[serde(default)]
    pub binning: BinningConfig,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// A parsed configuration and its post-override text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// The configuration after overrides, serialized back to TOML.
    pub resolved: String,
}

/// Sets `key.path = value` in `table`. The value is parsed as a TOML value
/// and taken as a plain string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies the overrides in order and validates.
    pub fn parse(text: &str, overrides: &[String], base_dir: &Path) -> Result<LoadedConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let resolved = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let mut config: RunConfig = toml::from_str(&resolved).map_err(|e| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(LoadedConfig { config, resolved })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, overrides, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.data.synthetic.is_some() == self.data.csv.is_some() {
            return Err(Error::Config("[data] needs exactly one of `synthetic` or `csv`".into()));
        }
        let u = &self.unlearn;
        let given = [u.algorithm.is_some(), u.stitch.is_some(), u.pipeline.is_some()];
        if given.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config(
                "[unlearn] takes one of `algorithm`, `stitch` or `pipeline`".into(),
            ));
        }
        self.train.validate()?;
        self.epsilon.validate()?;
        self.binning.validate()
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn store_dir(&self) -> Option<PathBuf> {
        self.store.as_deref().map(|p| self.resolve_path(p))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => generate_synthetic(spec, self.data.seed),
            (None, Some(path)) => load_csv(&self.resolve_path(path)),
            _ => Err(Error::Config("[data] needs exactly one of `synthetic` or `csv`".into())),
        }
    }

    pub fn problem(&self) -> Result<Problem> {
        let ds = self.dataset()?;
        let splits = make_splits(&ds, self.data.split, self.data.forget_fraction, self.data.seed)?;
        let mut sizes = vec![ds.feature_dim()];
        sizes.extend(&self.model.hidden);
        sizes.push(ds.num_classes());
        Problem::new(ds, splits, Architecture::new(sizes)?)
    }

    /// The configured pipeline; `identity` when `[unlearn]` is empty.
    pub fn pipeline(&self) -> Result<PipelineSpec> {
        let u = &self.unlearn;
        if let Some(p) = &u.pipeline {
            p.validate()?;
            return Ok(p.clone());
        }
        if let Some(s) = &u.stitch {
            return stitch(
                &resolve_pipeline(&s.erase, &self.train)?,
                &resolve_pipeline(&s.repair, &self.train)?,
            );
        }
        resolve_pipeline(u.algorithm.as_deref().unwrap_or("identity"), &self.train)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let e = &self.experiment;
        let cfg = ExperimentConfig {
            n: e.n,
            experiments: e.experiments,
            setup: e.setup,
            pool_size: e.pool_size,
            base_seed: e.base_seed,
            epsilon: self.epsilon.clone(),
            binning: self.binning.clone(),
            train: self.train.clone(),
            pipeline: self.pipeline()?,
            budget_fraction: e.budget_fraction,
            workers: e.workers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
