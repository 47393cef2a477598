//! The learning algorithm: class-weighted cross-entropy with SGD momentum.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, Dataset};
use crate::nn::{
    init_params, loss_and_grad, sgd_momentum_step, Architecture, ClassWeights, LossBatch, LossSpec,
    ModelParams, OptimizerState, Sample, SgdConfig,
};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

pub(crate) fn samples<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<Sample<'a>> {
    idx.iter()
        .map(|&i| {
            let e = ds.get(i);
            Sample {
                x: &e.features,
                label: e.label,
            }
        })
        .collect()
}

/// One epoch of mini-batch SGD on class-weighted CE over `order`; returns the
/// mean batch loss.
pub(crate) fn sgd_epoch(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    ds: &Dataset,
    order: &[usize],
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<f64> {
    let sgd = cfg.sgd();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch = LossBatch::new(samples(ds, chunk));
        let (loss, grads) = loss_and_grad(params, &batch, &LossSpec::CrossEntropy, weights, None)?;
        sgd_momentum_step(params, &grads, state, &sgd, None)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains from `init_params(arch, seed)`; batch order is reshuffled every
/// epoch from the seed's `shuffle` substream.
pub fn train(ds: &Dataset, idx: &[usize], arch: &Architecture, cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    train_with_history(ds, idx, arch, cfg, seed).map(|(p, _)| p)
}

/// Like [`train`], also returning the mean batch loss of every epoch.
pub fn train_with_history(
    ds: &Dataset,
    idx: &[usize],
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if idx.is_empty() {
        return Err(Error::invalid("empty training index set"));
    }
    if arch.input_dim() != ds.feature_dim() || arch.num_classes() != ds.num_classes() {
        return Err(Error::ArchitectureMismatch(format!(
            "architecture {:?} vs dataset dim {} and {} classes",
            arch.sizes(),
            ds.feature_dim(),
            ds.num_classes()
        )));
    }
    let weights = class_weights(ds, idx)?;
    let mut params = init_params(arch, seed);
    let mut state = OptimizerState::for_params(&params);
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut order = idx.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        history.push(sgd_epoch(&mut params, &mut state, ds, &order, &weights, cfg)?);
    }
    Ok((params, history))
}

/// Fraction of `idx` whose argmax prediction (lowest id on ties) equals the label.
pub fn accuracy(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("accuracy of an empty index set"));
    }
    let mut correct = 0usize;
    for &i in idx {
        let e = ds.get(i);
        if params.predict(&e.features)? == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Example, SyntheticSpec};
    use rand::Rng as _;

    fn toy(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec::new(60, (2, 4), 3, 4, 0.5), seed).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy(1);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let arch = Architecture::new(vec![4, 8, 3]).unwrap();
        let a = train(&ds, &idx, &arch, &quick(), 9).unwrap();
        let b = train(&ds, &idx, &arch, &quick(), 9).unwrap();
        assert_eq!(a, b);
        let c = train(&ds, &idx, &arch, &quick(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = toy(1);
        let arch = Architecture::new(vec![4, 8, 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick()
        };
        assert!(train(&ds, &[0, 1, 2], &arch, &cfg, 0).is_err());
        assert!(train(&ds, &[], &arch, &quick(), 0).is_err());
    }

    #[test]
    fn separable_two_class_problem() {
        let mut r = rng::stream(3, "test");
        let w = [1.0f64, -2.0, 0.5];
        let mut ex = Vec::new();
        while ex.len() < 400 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let m: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            if m.abs() < 0.3 {
                continue;
            }
            ex.push(Example {
                features: x.iter().map(|v| *v as f32).collect(),
                label: usize::from(m > 0.0),
                subject: ex.len() as u32,
            });
        }
        let ds = Dataset::new(ex, 2).unwrap();
        // the generating hyperplane separates the data exactly
        let oracle = ds
            .examples()
            .iter()
            .filter(|e| {
                let m: f64 = e.features.iter().zip(&w).map(|(a, b)| *a as f64 * b).sum();
                usize::from(m > 0.0) == e.label
            })
            .count();
        assert_eq!(oracle, ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        let arch = Architecture::new(vec![3, 8, 2]).unwrap();
        let p = train(&ds, &idx, &arch, &TrainConfig::default(), 1).unwrap();
        assert!(accuracy(&p, &ds, &idx).unwrap() >= 0.95);
    }

    #[test]
    fn accuracy_counts_and_ties() {
        let arch = Architecture::new(vec![1, 2]).unwrap();
        // logits = (x, 0): predicts 0 for x >= 0 (tie at 0 goes to class 0)
        let p = ModelParams::from_vec(&arch, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let ex = [(1.0, 0), (0.0, 0), (-1.0, 1), (2.0, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(x, label))| Example {
                features: vec![x],
                label,
                subject: i as u32,
            })
            .collect();
        let ds = Dataset::new(ex, 2).unwrap();
        assert_eq!(accuracy(&p, &ds, &[0, 1, 2, 3]).unwrap(), 0.75);
        assert_eq!(accuracy(&p, &ds, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &ds, &[1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &ds, &[3, 0, 2, 1]).unwrap(), 0.75);
        assert!(accuracy(&p, &ds, &[]).is_err());
    }

    #[test]
    fn final_epoch_loss_improves_on_first() {
        let arch = Architecture::new(vec![4, 8, 3]).unwrap();
        let seeds = 20;
        let violations = (0..seeds)
            .filter(|&s| {
                let ds = toy(s);
                let idx: Vec<usize> = (0..ds.len()).collect();
                let (_, h) = train_with_history(&ds, &idx, &arch, &quick(), s).unwrap();
                h.last().unwrap() > h.first().unwrap()
            })
            .count();
        assert!(violations * 20 <= seeds as usize, "{violations} of {seeds} seeds got worse");
    }
}
