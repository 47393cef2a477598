//! Unlearning algorithms as ordered lists of erase and repair phases.

mod presets;
mod select;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, Dataset, Splits};
use crate::nn::{
    draw_init, loss_and_grad, sgd_momentum_step, ClassWeights, LossBatch, LossSpec, ModelParams,
    OptimizerState, ParamMask, ParamSet, Sample, SgdConfig,
};
use crate::train::{samples, TrainConfig};
use crate::{rng, Error, Result};

pub use presets::{make_preset, preset_names, presets_toml, resolve_pipeline, retrain_oracle, identity};
pub use select::{bottom_fraction, salun_mask, top_fraction, LayerSet, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Erase,
    Repair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Retain,
    Forget,
    Val,
    /// Retain examples with fresh additive Gaussian feature noise each epoch.
    NoisyRetain,
    /// Forget examples relabelled uniformly among the other classes.
    ForgetRandomLabels,
}

/// Per-parameter learning-rate multipliers applied during a descent phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    None,
    /// Multiplier `selected` for the parameters chosen by the last reinit or
    /// noise phase, `rest` for the other parameters of `rest_layers`, and 1
    /// elsewhere. Zero multipliers freeze parameters exactly.
    Selection {
        selected: f64,
        rest: f64,
        rest_layers: LayerSet,
    },
    /// Only the saliency mask of the original model is updated.
    Saliency { threshold: f64 },
}

fn no_gate() -> Gate {
    Gate::None
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    32
}
fn default_input_noise() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descent {
    pub role: Role,
    pub loss: LossSpec,
    pub source: Source,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Ascend instead of descend.
    #[serde(default)]
    pub maximize: bool,
    /// Reciprocal retain-set class weights; uniform otherwise.
    #[serde(default = "yes")]
    pub class_weighted: bool,
    /// Per-example weights 1.0 for the majority retain class and 0.05 for
    /// the others, averaged over the batch size.
    #[serde(default)]
    pub majority_reweight: bool,
    /// Feature noise standard deviation for the `noisy_retain` source.
    #[serde(default = "default_input_noise")]
    pub input_noise: f64,
    #[serde(default = "no_gate")]
    pub gate: Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phase {
    /// Re-draws the selected parameters from the initialization distribution.
    Reinit { role: Role, selector: Selector },
    /// Adds `N(0, sigma^2)` to the weights (and biases) of `layers`.
    Noise {
        role: Role,
        sigma: f64,
        layers: LayerSet,
        #[serde(default = "yes")]
        include_bias: bool,
    },
    Descent(Descent),
    /// `alpha * CE(retain) - (1 - alpha) * CE(forget)` over retain batches,
    /// cycling through forget batches.
    AscentDescent {
        role: Role,
        alpha: f64,
        epochs: usize,
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

impl Phase {
    pub fn role(&self) -> Role {
        match self {
            Phase::Reinit { role, .. } | Phase::Noise { role, .. } | Phase::AscentDescent { role, .. } => *role,
            Phase::Descent(d) => d.role,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sgd = |lr, momentum, weight_decay| SgdConfig { lr, momentum, weight_decay }.validate();
        match self {
            Phase::Reinit { selector, .. } => match selector {
                Selector::WeightL1Bottom { frac, .. } | Selector::GradL1Bottom { frac, .. }
                    if !(0.0..=1.0).contains(frac) =>
                {
                    Err(Error::invalid("reinit fraction must be in [0, 1]"))
                }
                Selector::GradL1Bottom { probe, .. } => probe.validate(),
                _ => Ok(()),
            },
            Phase::Noise { sigma, .. } if !(*sigma >= 0.0) => Err(Error::invalid("noise sigma must be >= 0")),
            Phase::Noise { .. } => Ok(()),
            Phase::Descent(d) => {
                d.loss.validate()?;
                if d.batch_size == 0 {
                    return Err(Error::invalid("batch size must be >= 1"));
                }
                if !(d.input_noise >= 0.0) {
                    return Err(Error::invalid("input noise must be >= 0"));
                }
                if let Gate::Saliency { threshold } = d.gate {
                    if !(threshold > 0.0 && threshold < 1.0) {
                        return Err(Error::invalid("saliency threshold must be in (0, 1)"));
                    }
                }
                sgd(d.lr, d.momentum, d.weight_decay)
            }
            Phase::AscentDescent {
                alpha,
                lr,
                momentum,
                weight_decay,
                batch_size,
                ..
            } => {
                LossSpec::NegGradPlus { alpha: *alpha }.validate()?;
                if *batch_size == 0 {
                    return Err(Error::invalid("batch size must be >= 1"));
                }
                sgd(*lr, *momentum, *weight_decay)
            }
        }
    }
}

/// An unlearning algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub name: String,
    /// Declared hyperparameters, informational only.
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    pub phases: Vec<Phase>,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid(format!("pipeline `{}` has no phases", self.name)));
        }
        self.phases.iter().try_for_each(Phase::validate)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Erase phases of `erase_from` followed by the repair phases of `repair_from`.
pub fn stitch(erase_from: &PipelineSpec, repair_from: &PipelineSpec) -> Result<PipelineSpec> {
    let pick = |spec: &PipelineSpec, role| -> Vec<Phase> {
        spec.phases.iter().filter(|p| p.role() == role).cloned().collect()
    };
    let mut phases = pick(erase_from, Role::Erase);
    let repair = pick(repair_from, Role::Repair);
    if phases.is_empty() {
        return Err(Error::invalid(format!("`{}` has no erase phase", erase_from.name)));
    }
    if repair.is_empty() {
        return Err(Error::invalid(format!("`{}` has no repair phase", repair_from.name)));
    }
    phases.extend(repair);
    let mut hyperparameters = erase_from.hyperparameters.clone();
    hyperparameters.extend(repair_from.hyperparameters.clone());
    Ok(PipelineSpec {
        name: format!("stitch({},{})", erase_from.name, repair_from.name),
        hyperparameters,
        phases,
    })
}

/// Wall-time allowance relative to a measured retrain time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBudget {
    pub fraction: f64,
    #[serde(skip)]
    pub reference: Option<Duration>,
}

impl Default for RuntimeBudget {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            reference: None,
        }
    }
}

impl RuntimeBudget {
    pub fn new(fraction: f64, reference: Option<Duration>) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid("budget fraction must be in (0, 1]"));
        }
        Ok(Self { fraction, reference })
    }

    /// Without a reference time nothing is over budget.
    pub fn exceeded_by(&self, elapsed: Duration) -> bool {
        self.reference
            .is_some_and(|r| elapsed.as_secs_f64() > self.fraction * r.as_secs_f64())
    }
}

/// Inputs shared by every phase of one run.
pub struct UnlearnContext<'a> {
    pub ds: &'a Dataset,
    pub splits: &'a Splits,
    /// The original model, used by distillation losses and saliency.
    pub original: &'a ModelParams,
    retain_weights: ClassWeights,
    majority: usize,
}

impl<'a> UnlearnContext<'a> {
    pub fn new(ds: &'a Dataset, splits: &'a Splits, original: &'a ModelParams) -> Result<Self> {
        if splits.forget.is_empty() || splits.retain.is_empty() {
            return Err(Error::invalid("unlearning needs non-empty retain and forget sets"));
        }
        let counts = ds.class_counts(&splits.retain);
        let majority = crate::nn::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        Ok(Self {
            ds,
            splits,
            original,
            retain_weights: class_weights(ds, &splits.retain)?,
            majority,
        })
    }
}

#[derive(Default)]
struct PipelineState {
    last_selection: Option<ParamMask>,
}

/// Applies one phase on its own (no earlier selection available).
pub fn apply_phase(phase: &Phase, params: &ModelParams, ctx: &UnlearnContext, seed: u64) -> Result<ModelParams> {
    phase.validate()?;
    let mut out = params.clone();
    apply(phase, &mut out, ctx, &mut PipelineState::default(), seed)?;
    Ok(out)
}

fn apply(phase: &Phase, params: &mut ModelParams, ctx: &UnlearnContext, state: &mut PipelineState, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "phase");
    let arch = params.arch().clone();
    match phase {
        Phase::Reinit { selector, .. } => {
            let sctx = select::SelectCtx {
                ds: ctx.ds,
                splits: ctx.splits,
                original: ctx.original,
                weights: &ctx.retain_weights,
                last: state.last_selection.as_ref(),
            };
            let chosen = selector.select(params, &sctx, &mut rng)?;
            let mut draw = rng::stream(seed, "reinit");
            let p = params.as_mut_slice();
            for &i in &chosen {
                p[i] = draw_init(&arch, i, &mut draw);
            }
            state.last_selection = Some(select::mask_of(&arch, &chosen));
        }
        Phase::Noise {
            sigma,
            layers,
            include_bias,
            ..
        } => {
            let layers = layers.resolve(&arch, state.last_selection.as_ref(), &mut rng)?;
            let idx = select::layer_indices(&arch, &layers, *include_bias);
            if *sigma > 0.0 {
                let normal = Normal::new(0.0, *sigma).map_err(|e| Error::invalid(e.to_string()))?;
                let mut noise = rng::stream(seed, "noise");
                let p = params.as_mut_slice();
                for &i in &idx {
                    p[i] = (p[i] as f64 + normal.sample(&mut noise)) as f32;
                }
            }
            state.last_selection = Some(select::mask_of(&arch, &idx));
        }
        Phase::Descent(d) => descent(d, params, ctx, state, seed)?,
        Phase::AscentDescent {
            alpha,
            epochs,
            lr,
            momentum,
            weight_decay,
            batch_size,
            ..
        } => {
            let sgd = SgdConfig {
                lr: *lr,
                momentum: *momentum,
                weight_decay: *weight_decay,
            };
            let spec = LossSpec::NegGradPlus { alpha: *alpha };
            let mut opt = OptimizerState::for_params(params);
            let mut shuffle = rng::stream(seed, "shuffle");
            let mut retain = ctx.splits.retain.clone();
            let mut forget = ctx.splits.forget.clone();
            for _ in 0..*epochs {
                retain.shuffle(&mut shuffle);
                forget.shuffle(&mut shuffle);
                let mut fb = forget.chunks(*batch_size).cycle();
                for chunk in retain.chunks(*batch_size) {
                    let mut batch = LossBatch::new(samples(ctx.ds, chunk));
                    batch.secondary = samples(ctx.ds, fb.next().expect("forget set is non-empty"));
                    let (_, g) = loss_and_grad(params, &batch, &spec, &ctx.retain_weights, None)?;
                    sgd_momentum_step(params, &g, &mut opt, &sgd, None)?;
                }
            }
        }
    }
    Ok(())
}

fn descent(d: &Descent, params: &mut ModelParams, ctx: &UnlearnContext, state: &PipelineState, seed: u64) -> Result<()> {
    if d.epochs == 0 {
        return Ok(());
    }
    let arch = params.arch().clone();
    let k = ctx.ds.num_classes();
    let idx: &[usize] = match d.source {
        Source::Retain | Source::NoisyRetain => &ctx.splits.retain,
        Source::Forget | Source::ForgetRandomLabels => &ctx.splits.forget,
        Source::Val => &ctx.splits.val,
    };
    if idx.is_empty() {
        return Err(Error::invalid(format!("descent source {:?} is empty", d.source)));
    }
    let mut labels: Vec<usize> = idx.iter().map(|&i| ctx.ds.get(i).label).collect();
    if d.source == Source::ForgetRandomLabels && k > 1 {
        let mut relabel = rng::stream(seed, "relabel");
        for y in &mut labels {
            let shift = relabel.random_range(1..k);
            *y = (*y + shift) % k;
        }
    }
    let uniform;
    let weights = if d.class_weighted {
        &ctx.retain_weights
    } else {
        uniform = ClassWeights::uniform(k);
        &uniform
    };
    let multipliers: Option<ParamSet<f64>> = match &d.gate {
        Gate::None => None,
        Gate::Selection {
            selected,
            rest,
            rest_layers,
        } => {
            let mask = state
                .last_selection
                .as_ref()
                .ok_or_else(|| Error::invalid("selection gate without an earlier reinit or noise phase"))?;
            let mut gate_rng = rng::stream(seed, "gate");
            let rest_idx = select::layer_indices(&arch, &rest_layers.resolve(&arch, Some(mask), &mut gate_rng)?, true);
            let mut m = ParamSet::filled(&arch, 1.0);
            for i in rest_idx {
                m.as_mut_slice()[i] = *rest;
            }
            for (v, &sel) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                if sel {
                    *v = *selected;
                }
            }
            Some(m)
        }
        Gate::Saliency { threshold } => {
            let mask = salun_mask(ctx.original, ctx.splits, ctx.ds, *threshold)?;
            let v = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Some(ParamSet::from_vec(&arch, v)?)
        }
    };
    let reference = d.loss.needs_reference().then_some(ctx.original);
    let sgd = SgdConfig {
        lr: d.lr,
        momentum: d.momentum,
        weight_decay: d.weight_decay,
    };
    let mut opt = OptimizerState::for_params(params);
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut noise_rng = rng::stream(seed, "input_noise");
    let mut secondary_rng = rng::stream(seed, "secondary");
    let input_noise = Normal::new(0.0, d.input_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut order: Vec<usize> = (0..idx.len()).collect();
    for _ in 0..d.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(d.batch_size) {
            let noisy: Vec<Vec<f32>> = if d.source == Source::NoisyRetain {
                chunk
                    .iter()
                    .map(|&j| {
                        ctx.ds
                            .get(idx[j])
                            .features
                            .iter()
                            .map(|&x| (x as f64 + input_noise.sample(&mut noise_rng)) as f32)
                            .collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let primary: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(b, &j)| Sample {
                    x: if noisy.is_empty() {
                        &ctx.ds.get(idx[j]).features
                    } else {
                        &noisy[b]
                    },
                    label: labels[j],
                })
                .collect();
            let mut batch = LossBatch::new(primary);
            if d.loss.needs_secondary() {
                let pick: Vec<usize> = (0..chunk.len())
                    .map(|_| ctx.splits.retain[secondary_rng.random_range(0..ctx.splits.retain.len())])
                    .collect();
                batch.secondary = samples(ctx.ds, &pick);
            }
            if d.majority_reweight {
                batch.example_weights = Some(
                    chunk
                        .iter()
                        .map(|&j| if labels[j] == ctx.majority { 1.0 } else { 0.05 })
                        .collect(),
                );
            }
            let (_, mut g) = loss_and_grad(params, &batch, &d.loss, weights, reference)?;
            if d.maximize {
                g.scale(-1.0);
            }
            sgd_momentum_step(params, &g, &mut opt, &sgd, multipliers.as_ref())?;
        }
    }
    Ok(())
}

/// Output of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub params: ModelParams,
    pub elapsed: Duration,
    pub over_budget: bool,
}

/// Applies the phases in order; phase `i` is seeded from
/// `derive_indexed(seed, "phase", i)`.
pub fn run_pipeline(spec: &PipelineSpec, ctx: &UnlearnContext, seed: u64, budget: &RuntimeBudget) -> Result<PipelineRun> {
    spec.validate()?;
    let start = Instant::now();
    let mut params = ctx.original.clone();
    let mut state = PipelineState::default();
    for (i, phase) in spec.phases.iter().enumerate() {
        apply(phase, &mut params, ctx, &mut state, rng::derive_indexed(seed, "phase", i as u64))?;
    }
    let elapsed = start.elapsed();
    Ok(PipelineRun {
        params,
        elapsed,
        over_budget: budget.exceeded_by(elapsed),
    })
}

/// Retraining from scratch on the retain set, expressed as a pipeline.
pub(crate) fn retrain_phases(train: &TrainConfig) -> Vec<Phase> {
    vec![
        Phase::Reinit {
            role: Role::Erase,
            selector: Selector::Layers { layers: LayerSet::All },
        },
        Phase::Descent(Descent {
            role: Role::Repair,
            loss: LossSpec::CrossEntropy,
            source: Source::Retain,
            epochs: train.epochs,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            maximize: false,
            class_weighted: true,
            majority_reweight: false,
            input_noise: default_input_noise(),
            gate: Gate::None,
        }),
    ]
}
