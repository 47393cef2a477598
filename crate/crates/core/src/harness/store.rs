//! On-disk pools of trained models.
//!
//! Layout: `<root>/<kind>/manifest.json` plus one `model-NNNNN.ckpt` per
//! entry. Checkpoints and manifests are written to a temporary file and
//! renamed into place, so readers never see partial files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Problem;
use crate::nn::{load_checkpoint, save_checkpoint, ModelParams};
use crate::train::{train, TrainConfig};
use crate::{rng, stats, Error, Result};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Trained on the full training set.
    Original,
    /// Trained on the retain set only.
    Retrained,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Original => "original",
            PoolKind::Retrained => "retrained",
        }
    }

    /// Training seed of model `index`.
    pub fn seed(self, base_seed: u64, index: usize) -> u64 {
        rng::derive_indexed(base_seed, self.as_str(), index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub index: usize,
    pub seed: u64,
    pub file: String,
    /// Wall time of the training run in milliseconds.
    pub train_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub kind: PoolKind,
    pub config_hash: String,
    /// Sorted by index; indices are `0..entries.len()`.
    pub entries: Vec<PoolEntry>,
}

/// What a pool's models depend on.
pub struct PoolSpec<'a> {
    pub problem: &'a Problem,
    pub train: &'a TrainConfig,
    pub base_seed: u64,
}

impl PoolSpec<'_> {
    pub fn config_hash(&self, kind: PoolKind) -> String {
        let mut h = Sha256::new();
        h.update(b"forgetbench-pool-v1");
        h.update(kind.as_str().as_bytes());
        h.update(self.problem.fingerprint());
        h.update(serde_json::to_vec(self.train).expect("train config serializes"));
        h.update(self.base_seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Outcome of [`ModelPoolStore::build_pool`].
#[derive(Debug, Clone)]
pub struct PoolBuild {
    pub manifest: PoolManifest,
    /// Models trained by this call (0 when everything was reused).
    pub trained: usize,
}

pub struct ModelPoolStore {
    root: PathBuf,
    manifest_lock: Mutex<()>,
}

impl ModelPoolStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            manifest_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, kind: PoolKind) -> PathBuf {
        self.root.join(kind.as_str())
    }

    fn manifest_path(&self, kind: PoolKind) -> PathBuf {
        self.dir(kind).join("manifest.json")
    }

    fn store_err(&self, message: impl Into<String>) -> Error {
        Error::Store {
            path: self.root.clone(),
            message: message.into(),
        }
    }

    pub fn manifest(&self, kind: PoolKind) -> Result<Option<PoolManifest>> {
        let path = self.manifest_path(kind);
        if !path.exists() {
            return Ok(None);
        }
        let m: PoolManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if m.version != MANIFEST_VERSION || m.kind != kind {
            return Err(self.store_err(format!("{} has an unexpected version or kind", path.display())));
        }
        Ok(Some(m))
    }

    /// Number of models currently recorded for `kind`.
    pub fn count(&self, kind: PoolKind) -> Result<usize> {
        Ok(self.manifest(kind)?.map_or(0, |m| m.entries.len()))
    }

    fn write_manifest(&self, m: &PoolManifest) -> Result<()> {
        let path = self.manifest_path(m.kind);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(m)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Grows the pool of `kind` to at least `count` models. Existing valid
    /// checkpoints are reused; a manifest written under a different
    /// configuration is an error.
    pub fn build_pool(&self, kind: PoolKind, count: usize, spec: &PoolSpec) -> Result<PoolBuild> {
        let _guard = self.manifest_lock.lock().expect("manifest lock poisoned");
        let hash = spec.config_hash(kind);
        let dir = self.dir(kind);
        fs::create_dir_all(&dir)?;
        let mut manifest = match self.manifest(kind)? {
            Some(m) if m.config_hash != hash => {
                return Err(self.store_err(format!(
                    "{} pool was built with config {} but {} was requested",
                    kind.as_str(),
                    &m.config_hash[..12],
                    &hash[..12]
                )))
            }
            Some(m) => m,
            None => PoolManifest {
                version: MANIFEST_VERSION,
                kind,
                config_hash: hash,
                entries: Vec::new(),
            },
        };
        // drop entries whose checkpoint disappeared; they are retrained
        let valid = manifest
            .entries
            .iter()
            .take_while(|e| dir.join(&e.file).is_file())
            .count();
        manifest.entries.truncate(valid);
        let missing: Vec<usize> = (manifest.entries.len()..count).collect();
        let idx = match kind {
            PoolKind::Original => &spec.problem.splits.train,
            PoolKind::Retrained => &spec.problem.splits.retain,
        };
        let fresh = missing
            .par_iter()
            .map(|&i| {
                let seed = kind.seed(spec.base_seed, i);
                let start = Instant::now();
                let params = train(&spec.problem.ds, idx, &spec.problem.arch, spec.train, seed)?;
                let train_ms = start.elapsed().as_secs_f64() * 1e3;
                let file = format!("model-{i:05}.ckpt");
                save_checkpoint(&params, &dir.join(&file))?;
                Ok(PoolEntry {
                    index: i,
                    seed,
                    file,
                    train_ms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trained = fresh.len();
        manifest.entries.extend(fresh);
        if trained > 0 || !self.manifest_path(kind).exists() {
            self.write_manifest(&manifest)?;
        }
        if trained > 0 {
            log::info!("trained {trained} {} models", kind.as_str());
        }
        Ok(PoolBuild { manifest, trained })
    }

    pub fn load(&self, kind: PoolKind, index: usize) -> Result<ModelParams> {
        let m = self
            .manifest(kind)?
            .ok_or_else(|| self.store_err(format!("no {} pool", kind.as_str())))?;
        let e = m
            .entries
            .get(index)
            .ok_or_else(|| self.store_err(format!("{} pool has no model {index}", kind.as_str())))?;
        load_checkpoint(&self.dir(kind).join(&e.file))
    }

    /// Median training time of the retrained pool, the runtime-budget reference.
    pub fn reference_train_time(&self) -> Result<Option<Duration>> {
        let Some(m) = self.manifest(PoolKind::Retrained)? else {
            return Ok(None);
        };
        if m.entries.is_empty() {
            return Ok(None);
        }
        let ms: Vec<f64> = m.entries.iter().map(|e| e.train_ms).collect();
        Ok(Some(Duration::from_secs_f64(stats::median(&ms) / 1e3)))
    }
}
