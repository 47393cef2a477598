//! Fixed-family multilayer perceptron with hand-written gradients.
//!
//! Parameters are stored as `f32` (the checkpoint format is 32-bit), while the
//! forward pass, backpropagation, loss accumulation and optimizer buffers run
//! in `f64`.

mod checkpoint;
mod loss;
mod optim;

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use loss::{loss_and_grad, ClassWeights, LossBatch, LossSpec, Sample};
pub use optim::{sgd_momentum_step, OptimizerState, SgdConfig};

/// Lower/upper clamp applied to the correct-class probability before logit scaling.
pub const PROB_CLAMP: f64 = 1e-9;

/// Layer widths: input dimension, hidden widths, class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Architecture::new(sizes)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(a: Architecture) -> Self {
        a.sizes
    }
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("architecture needs at least input and output sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(inputs, outputs)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.sizes[l], self.sizes[l + 1])
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (i, o) = self.layer_shape(k);
                o * i + o
            })
            .sum()
    }

    /// Flat range of layer `l`'s weight matrix (row-major, rows = outputs).
    pub fn weight_range(&self, l: usize) -> Range<usize> {
        let start = self.layer_offset(l);
        let (i, o) = self.layer_shape(l);
        start..start + o * i
    }

    pub fn bias_range(&self, l: usize) -> Range<usize> {
        let w = self.weight_range(l);
        let (_, o) = self.layer_shape(l);
        w.end..w.end + o
    }

    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.weight_range(l).start..self.bias_range(l).end
    }

    pub fn num_params(&self) -> usize {
        self.layer_offset(self.num_layers())
    }

    /// Layer index owning flat parameter `idx`, and whether it is a weight.
    pub fn locate(&self, idx: usize) -> (usize, bool) {
        for l in 0..self.num_layers() {
            if self.weight_range(l).contains(&idx) {
                return (l, true);
            }
            if self.bias_range(l).contains(&idx) {
                return (l, false);
            }
        }
        panic!("parameter index {idx} out of range");
    }
}

/// A flat buffer with one entry per network parameter, laid out layer by
/// layer as `[weights (out x in, row-major), bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    arch: Architecture,
    data: Vec<T>,
}

/// Network weights and biases.
pub type ModelParams = ParamSet<f32>;
/// Partial derivatives, same layout as [`ModelParams`].
pub type Gradients = ParamSet<f64>;
/// Per-parameter selection.
pub type ParamMask = ParamSet<bool>;

impl<T: Clone> ParamSet<T> {
    pub fn filled(arch: &Architecture, value: T) -> Self {
        Self {
            arch: arch.clone(),
            data: vec![value; arch.num_params()],
        }
    }
}

impl<T> ParamSet<T> {
    pub fn from_vec(arch: &Architecture, data: Vec<T>) -> Result<Self> {
        if data.len() != arch.num_params() {
            return Err(Error::Dimension {
                expected: arch.num_params(),
                got: data.len(),
            });
        }
        Ok(Self {
            arch: arch.clone(),
            data,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn weights(&self, l: usize) -> &[T] {
        &self.data[self.arch.weight_range(l)]
    }

    pub fn bias(&self, l: usize) -> &[T] {
        &self.data[self.arch.bias_range(l)]
    }

    pub fn same_shape<U>(&self, other: &ParamSet<U>) -> bool {
        self.arch == other.arch
    }
}

impl ParamMask {
    pub fn count_selected(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl Gradients {
    pub fn zeros(arch: &Architecture) -> Self {
        Self::filled(arch, 0.0)
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }
}

fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Draw a fresh value for flat parameter `idx` from the initialization
/// distribution: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0.
pub(crate) fn draw_init(arch: &Architecture, idx: usize, rng: &mut rng::Rng) -> f32 {
    let (l, is_weight) = arch.locate(idx);
    if !is_weight {
        return 0.0;
    }
    let b = uniform_bound(arch.layer_shape(l).0);
    rng.random_range(-b..b) as f32
}

/// Deterministic initialization from `(arch, seed)`.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = rng::stream(seed, "init");
    let mut params = ModelParams::filled(arch, 0.0);
    for l in 0..arch.num_layers() {
        let b = uniform_bound(arch.layer_shape(l).0);
        let dist = Uniform::new(-b, b).expect("finite bound");
        for w in &mut params.data[arch.weight_range(l)] {
            *w = dist.sample(&mut rng) as f32;
        }
    }
    params
}

/// Activations of every layer for one input, kept for backpropagation.
/// `acts[0]` is the input, `acts[l + 1]` the (rectified, except for the last)
/// output of layer `l`.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl ModelParams {
    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::Dimension {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f32]) -> Result<Trace> {
        self.check_input(x)?;
        let n_layers = self.arch.num_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.iter().map(|&v| v as f64).collect::<Vec<_>>());
        for l in 0..n_layers {
            let (n_in, n_out) = self.arch.layer_shape(l);
            let w = self.weights(l);
            let b = self.bias(l);
            let input = &acts[l];
            let mut out = vec![0.0f64; n_out];
            for (o, slot) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = b[o] as f64;
                for (wi, xi) in row.iter().zip(input) {
                    s += *wi as f64 * xi;
                }
                *slot = if l + 1 < n_layers { s.max(0.0) } else { s };
            }
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Accumulate `d loss / d params` into `grads` given `d loss / d logits`.
    pub(crate) fn backprop(&self, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) {
        let n_layers = self.arch.num_layers();
        let mut delta = dlogits.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = self.arch.layer_shape(l);
            let input = &trace.acts[l];
            let wr = self.arch.weight_range(l);
            let br = self.arch.bias_range(l);
            {
                let gw = &mut grads.data[wr.clone()];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            for (g, d) in grads.data[br].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = self.weights(l);
                let mut prev = vec![0.0f64; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += *wi as f64 * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Network function: affine layers, rectifier on hidden layers, linear output.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.acts.pop().unwrap())
    }

    /// Highest-logit class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Softmax probability of `label`, clamped to `[1e-9, 1 - 1e-9]`.
    pub fn confidence_correct(&self, x: &[f32], label: usize) -> Result<f64> {
        let k = self.arch.num_classes();
        if label >= k {
            return Err(Error::invalid(format!("label {label} >= class count {k}")));
        }
        let p = softmax(&self.forward(x)?)[label];
        Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `h(p) = ln p - ln(1 - p)`.
pub fn logit_scale(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn prediction_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
