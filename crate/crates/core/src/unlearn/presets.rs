//! Built-in unlearning presets loaded from an embedded TOML file.

use std::sync::OnceLock;

use serde::Deserialize;

use super::{retrain_phases, Descent, Gate, Phase, PipelineSpec, Role, Source};
use crate::nn::LossSpec;
use crate::train::TrainConfig;
use crate::{Error, Result};

const PRESETS: &str = include_str!("presets.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    version: u32,
    preset: Vec<PipelineSpec>,
}

fn presets() -> &'static [PipelineSpec] {
    static CELL: OnceLock<Vec<PipelineSpec>> = OnceLock::new();
    CELL.get_or_init(|| {
        let file: PresetFile = toml::from_str(PRESETS).expect("embedded presets parse");
        assert_eq!(file.version, 1);
        file.preset
    })
}

/// The text of the embedded defaults file.
pub fn presets_toml() -> &'static str {
    PRESETS
}

pub fn preset_names() -> Vec<&'static str> {
    presets().iter().map(|p| p.name.as_str()).collect()
}

pub fn make_preset(name: &str) -> Result<PipelineSpec> {
    presets()
        .iter()
        .find(|p| p.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

/// Leaves the original model untouched.
pub fn identity() -> PipelineSpec {
    PipelineSpec {
        name: "identity".into(),
        hyperparameters: Default::default(),
        phases: vec![Phase::Descent(Descent {
            role: Role::Repair,
            loss: LossSpec::CrossEntropy,
            source: Source::Retain,
            epochs: 0,
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            maximize: false,
            class_weighted: true,
            majority_reweight: false,
            input_noise: 0.0,
            gate: Gate::None,
        })],
    }
}

/// Full retraining on the retain set with the training recipe.
pub fn retrain_oracle(train: &TrainConfig) -> PipelineSpec {
    PipelineSpec {
        name: "retrain_oracle".into(),
        hyperparameters: [("epochs".to_string(), train.epochs as f64), ("lr".to_string(), train.lr)]
            .into_iter()
            .collect(),
        phases: retrain_phases(train),
    }
}

/// A preset or one of the reference pipelines `identity`, `retrain_oracle`.
pub fn resolve_pipeline(name: &str, train: &TrainConfig) -> Result<PipelineSpec> {
    match name {
        "identity" => Ok(identity()),
        "retrain_oracle" => Ok(retrain_oracle(train)),
        _ => make_preset(name),
    }
}
