//! Training and unlearning objectives.
//!
//! Every loss is reduced to per-example gradients with respect to the logits,
//! which are then backpropagated through the network. Notation below: `z` are
//! the logits of the model being trained, `z0` those of the reference model,
//! `p = softmax(z)`, `q = softmax(z0)` and `w_y` the class weight of label `y`.

use serde::{Deserialize, Serialize};

use super::{log_softmax, softmax, Gradients, ModelParams, Trace};
use crate::{Error, Result};

/// Per-class loss weights (usually reciprocal class counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be finite and positive"));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Loss variants.
///
/// | variant | loss |
/// |---|---|
/// | `ce` | class-weighted mean cross-entropy `sum w_y l / sum w_y` |
/// | `ce_entropy_mse` | `ce + mean (H(p) - H(q))^2` |
/// | `ce_sym_kl` | `ce + mean [KL(p‖q) + KL(q‖p)]` |
/// | `kl_distill` | `alpha * T^2 * mean KL(q_T‖p_T) + (1 - alpha) * ce` |
/// | `mse_distill` | `mean_{i,k} (z - z0)^2` |
/// | `uniform_kl` | `mean KL(p‖uniform)` |
/// | `contrastive` | see [`LossSpec::Contrastive`] |
/// | `neggrad_plus` | `alpha * ce(primary) - (1 - alpha) * ce(secondary)` |
/// | `l1_ce` | `ce + lambda * sum |theta|` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    #[serde(rename = "ce")]
    CrossEntropy,
    CeEntropyMse,
    CeSymKl,
    KlDistill {
        #[serde(default = "one")]
        temperature: f64,
        #[serde(default = "one")]
        alpha: f64,
    },
    MseDistill,
    UniformKl,
    /// Forget-batch outputs (primary) against retain-batch outputs
    /// (secondary): with `a`, `b` the L2-normalized logits and
    /// `s_ij = <a_i, b_j> / T`, the loss is
    /// `mean_i mean_j [-log softmax_j(s_i)]`. Pipelines maximize it.
    Contrastive {
        #[serde(default = "one")]
        temperature: f64,
    },
    #[serde(rename = "neggrad_plus")]
    NegGradPlus { alpha: f64 },
    #[serde(rename = "l1_ce")]
    L1Ce { l1_weight: f64 },
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::CrossEntropy => "ce",
            LossSpec::CeEntropyMse => "ce_entropy_mse",
            LossSpec::CeSymKl => "ce_sym_kl",
            LossSpec::KlDistill { .. } => "kl_distill",
            LossSpec::MseDistill => "mse_distill",
            LossSpec::UniformKl => "uniform_kl",
            LossSpec::Contrastive { .. } => "contrastive",
            LossSpec::NegGradPlus { .. } => "neggrad_plus",
            LossSpec::L1Ce { .. } => "l1_ce",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(
            self,
            LossSpec::CeEntropyMse
                | LossSpec::CeSymKl
                | LossSpec::KlDistill { .. }
                | LossSpec::MseDistill
        )
    }

    /// Whether the loss reads the secondary batch.
    pub fn needs_secondary(&self) -> bool {
        match self {
            LossSpec::Contrastive { .. } => true,
            LossSpec::NegGradPlus { alpha } => *alpha < 1.0,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha_ok = |a: f64| (0.0..=1.0).contains(&a);
        match *self {
            LossSpec::KlDistill { temperature, alpha } => {
                if !(temperature > 0.0) || !alpha_ok(alpha) {
                    return Err(Error::invalid("kl_distill needs temperature > 0, alpha in [0,1]"));
                }
            }
            LossSpec::Contrastive { temperature } if !(temperature > 0.0) => {
                return Err(Error::invalid("contrastive temperature must be > 0"));
            }
            LossSpec::NegGradPlus { alpha } if !alpha_ok(alpha) => {
                return Err(Error::invalid("neggrad_plus alpha must be in [0,1]"));
            }
            LossSpec::L1Ce { l1_weight } if !(l1_weight >= 0.0) => {
                return Err(Error::invalid("l1 weight must be >= 0"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f32],
    pub label: usize,
}

/// Examples fed to one loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossBatch<'a> {
    pub primary: Vec<Sample<'a>>,
    /// Forget batch for `neggrad_plus`, retain batch for `contrastive`.
    pub secondary: Vec<Sample<'a>>,
    /// When set, the cross-entropy term on the primary batch becomes
    /// `sum_i e_i l_i / n` instead of the class-weighted mean.
    pub example_weights: Option<Vec<f64>>,
}

impl<'a> LossBatch<'a> {
    pub fn new(primary: Vec<Sample<'a>>) -> Self {
        Self {
            primary,
            ..Default::default()
        }
    }
}

struct Forward {
    traces: Vec<Trace>,
    dlogits: Vec<Vec<f64>>,
}

impl Forward {
    fn run(params: &ModelParams, batch: &[Sample]) -> Result<Self> {
        let k = params.arch().num_classes();
        let mut traces = Vec::with_capacity(batch.len());
        for s in batch {
            if s.label >= k {
                return Err(Error::invalid(format!("label {} >= class count {k}", s.label)));
            }
            traces.push(params.trace(s.x)?);
        }
        let dlogits = vec![vec![0.0; k]; batch.len()];
        Ok(Self { traces, dlogits })
    }

    fn logits(&self, i: usize) -> &[f64] {
        self.traces[i].logits()
    }
}

fn reference_logits(reference: &ModelParams, batch: &[Sample]) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|s| reference.forward(s.x)).collect()
}

/// Cross-entropy term, scaled by `coef`. Class-weighted mean unless
/// `example_weights` are given.
fn cross_entropy(
    fw: &mut Forward,
    batch: &[Sample],
    weights: &[f64],
    example_weights: Option<&[f64]>,
    coef: f64,
) -> Result<f64> {
    let n = batch.len();
    let per_example: Vec<f64> = match example_weights {
        Some(e) => {
            if e.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: e.len(),
                });
            }
            e.iter().map(|w| w / n as f64).collect()
        }
        None => {
            let total: f64 = batch.iter().map(|s| weights[s.label]).sum();
            batch.iter().map(|s| weights[s.label] / total).collect()
        }
    };
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let lsm = log_softmax(fw.logits(i));
        let c = per_example[i] * coef;
        loss += -per_example[i] * lsm[s.label];
        for (j, d) in fw.dlogits[i].iter_mut().enumerate() {
            let t = if j == s.label { 1.0 } else { 0.0 };
            *d += c * (lsm[j].exp() - t);
        }
    }
    Ok(coef * loss)
}

fn entropy_from_log(p: &[f64], lp: &[f64]) -> f64 {
    -p.iter().zip(lp).map(|(a, b)| a * b).sum::<f64>()
}

/// d H(softmax z) / d z_j = -p_j (ln p_j + H)
fn entropy_grad<'a>(p: &'a [f64], lp: &'a [f64], h: f64) -> impl Iterator<Item = f64> + 'a {
    p.iter().zip(lp).map(move |(pj, lj)| -pj * (lj + h))
}

fn kl(a: &[f64], la: &[f64], lb: &[f64]) -> f64 {
    a.iter().zip(la.iter().zip(lb)).map(|(p, (x, y))| p * (x - y)).sum()
}

fn l2_normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let norm = (z.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
    (z.iter().map(|v| v / norm).collect(), norm)
}

/// Backpropagate a gradient on the normalized vector `u = z / |z|` to `z`:
/// `(g - u <u, g>) / |z|`.
fn normalize_backward(u: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    u.iter().zip(g).map(|(ui, gi)| (gi - ui * dot) / norm).collect()
}

/// Batch loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &LossBatch,
    spec: &LossSpec,
    weights: &ClassWeights,
    reference: Option<&ModelParams>,
) -> Result<(f64, Gradients)> {
    spec.validate()?;
    let arch = params.arch();
    let k = arch.num_classes();
    if batch.primary.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if weights.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: weights.len(),
        });
    }
    if spec.needs_secondary() && batch.secondary.is_empty() {
        return Err(Error::invalid(format!("{} needs a secondary batch", spec.name())));
    }
    let reference = if spec.needs_reference() {
        let r = reference.ok_or(Error::MissingReference(spec.name()))?;
        if r.arch() != arch {
            return Err(Error::ArchitectureMismatch(
                "reference model differs from trained model".into(),
            ));
        }
        Some(r)
    } else {
        None
    };

    let w = weights.as_slice();
    let ew = batch.example_weights.as_deref();
    let n = batch.primary.len() as f64;
    let mut fw = Forward::run(params, &batch.primary)?;
    let mut fw2: Option<Forward> = None;
    let mut extra_grad: Option<Vec<f64>> = None;

    let loss = match *spec {
        LossSpec::CrossEntropy => cross_entropy(&mut fw, &batch.primary, w, ew, 1.0)?,
        LossSpec::CeEntropyMse => {
            let ce = cross_entropy(&mut fw, &batch.primary, w, ew, 1.0)?;
            let z0 = reference_logits(reference.unwrap(), &batch.primary)?;
            let mut mse = 0.0;
            for (i, zr) in z0.iter().enumerate() {
                let lp = log_softmax(fw.logits(i));
                let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let lq = log_softmax(zr);
                let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
                let h = entropy_from_log(&p, &lp);
                let diff = h - entropy_from_log(&q, &lq);
                mse += diff * diff / n;
                let c = 2.0 * diff / n;
                for (d, g) in fw.dlogits[i].iter_mut().zip(entropy_grad(&p, &lp, h)) {
                    *d += c * g;
                }
            }
            ce + mse
        }
        LossSpec::CeSymKl => {
            let ce = cross_entropy(&mut fw, &batch.primary, w, ew, 1.0)?;
            let z0 = reference_logits(reference.unwrap(), &batch.primary)?;
            let mut sym = 0.0;
            for (i, zr) in z0.iter().enumerate() {
                let lp = log_softmax(fw.logits(i));
                let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let lq = log_softmax(zr);
                let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
                let kl_pq = kl(&p, &lp, &lq);
                sym += (kl_pq + kl(&q, &lq, &lp)) / n;
                // d KL(p||q)/dz_j = p_j (ln p_j - ln q_j - KL(p||q)); d KL(q||p)/dz_j = p_j - q_j
                for j in 0..k {
                    fw.dlogits[i][j] += (p[j] * (lp[j] - lq[j] - kl_pq) + p[j] - q[j]) / n;
                }
            }
            ce + sym
        }
        LossSpec::KlDistill { temperature, alpha } => {
            let ce = if alpha < 1.0 {
                cross_entropy(&mut fw, &batch.primary, w, ew, 1.0 - alpha)?
            } else {
                0.0
            };
            let z0 = reference_logits(reference.unwrap(), &batch.primary)?;
            let t = temperature;
            let mut kd = 0.0;
            for (i, zr) in z0.iter().enumerate() {
                let zs: Vec<f64> = fw.logits(i).iter().map(|v| v / t).collect();
                let zt: Vec<f64> = zr.iter().map(|v| v / t).collect();
                let lp = log_softmax(&zs);
                let lq = log_softmax(&zt);
                let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
                kd += kl(&q, &lq, &lp) * t * t / n;
                let c = alpha * t / n;
                for j in 0..k {
                    fw.dlogits[i][j] += c * (lp[j].exp() - q[j]);
                }
            }
            alpha * kd + ce
        }
        LossSpec::MseDistill => {
            let z0 = reference_logits(reference.unwrap(), &batch.primary)?;
            let denom = n * k as f64;
            let mut mse = 0.0;
            for (i, zr) in z0.iter().enumerate() {
                let z = fw.logits(i).to_vec();
                for j in 0..k {
                    let d = z[j] - zr[j];
                    mse += d * d / denom;
                    fw.dlogits[i][j] += 2.0 * d / denom;
                }
            }
            mse
        }
        LossSpec::UniformKl => {
            let ln_k = (k as f64).ln();
            let mut total = 0.0;
            for i in 0..batch.primary.len() {
                let lp = log_softmax(fw.logits(i));
                let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let h = entropy_from_log(&p, &lp);
                total += (ln_k - h) / n;
                for (d, g) in fw.dlogits[i].iter_mut().zip(entropy_grad(&p, &lp, h)) {
                    *d -= g / n;
                }
            }
            total
        }
        LossSpec::Contrastive { temperature } => {
            let mut other = Forward::run(params, &batch.secondary)?;
            let m = batch.primary.len();
            let r = batch.secondary.len();
            let a: Vec<(Vec<f64>, f64)> = (0..m).map(|i| l2_normalize(fw.logits(i))).collect();
            let b: Vec<(Vec<f64>, f64)> = (0..r).map(|j| l2_normalize(other.logits(j))).collect();
            let mut ga = vec![vec![0.0; k]; m];
            let mut gb = vec![vec![0.0; k]; r];
            let mut total = 0.0;
            for i in 0..m {
                let s: Vec<f64> = b
                    .iter()
                    .map(|(bj, _)| a[i].0.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>() / temperature)
                    .collect();
                let lsm = log_softmax(&s);
                total += -lsm.iter().sum::<f64>() / (r as f64 * m as f64);
                let sm = softmax(&s);
                for j in 0..r {
                    // d/ds_ij of mean_j' [-log softmax_j'] = softmax_j - 1/r, then mean over i
                    let ds = (sm[j] - 1.0 / r as f64) / m as f64 / temperature;
                    for c in 0..k {
                        ga[i][c] += ds * b[j].0[c];
                        gb[j][c] += ds * a[i].0[c];
                    }
                }
            }
            for i in 0..m {
                let g = normalize_backward(&a[i].0, a[i].1, &ga[i]);
                fw.dlogits[i].iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            for j in 0..r {
                other.dlogits[j] = normalize_backward(&b[j].0, b[j].1, &gb[j]);
            }
            fw2 = Some(other);
            total
        }
        LossSpec::NegGradPlus { alpha } => {
            let retain = cross_entropy(&mut fw, &batch.primary, w, ew, alpha)?;
            if alpha < 1.0 {
                let mut other = Forward::run(params, &batch.secondary)?;
                let forget = cross_entropy(&mut other, &batch.secondary, w, None, -(1.0 - alpha))?;
                fw2 = Some(other);
                retain + forget
            } else {
                retain
            }
        }
        LossSpec::L1Ce { l1_weight } => {
            let ce = cross_entropy(&mut fw, &batch.primary, w, ew, 1.0)?;
            let l1: f64 = params.as_slice().iter().map(|v| (*v as f64).abs()).sum();
            extra_grad = Some(
                params
                    .as_slice()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            l1_weight
                        } else if v < 0.0 {
                            -l1_weight
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
            ce + l1_weight * l1
        }
    };

    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: loss,
            context: spec.name().into(),
        });
    }

    let mut grads = Gradients::zeros(arch);
    for (t, d) in fw.traces.iter().zip(&fw.dlogits) {
        params.backprop(t, d, &mut grads);
    }
    if let Some(o) = fw2 {
        for (t, d) in o.traces.iter().zip(&o.dlogits) {
            params.backprop(t, d, &mut grads);
        }
    }
    if let Some(e) = extra_grad {
        grads.as_mut_slice().iter_mut().zip(e).for_each(|(g, v)| *g += v);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture};

    #[test]
    fn uniform_ce_is_ln_k() {
        let arch = Architecture::new(vec![2, 3]).unwrap();
        let p = ModelParams::filled(&arch, 0.0);
        let x = [0.5f32, -1.0];
        let batch = LossBatch::new(vec![Sample { x: &x, label: 1 }]);
        let (l, _) =
            loss_and_grad(&p, &batch, &LossSpec::CrossEntropy, &ClassWeights::uniform(3), None)
                .unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_equal_plain_mean_ce() {
        let arch = Architecture::new(vec![3, 4, 3]).unwrap();
        let p = init_params(&arch, 3);
        let xs = [[0.1f32, 0.2, -0.4], [1.0, -0.5, 0.3], [0.0, 0.7, 0.9]];
        let labels = [0usize, 2, 1];
        let batch = LossBatch::new(
            xs.iter()
                .zip(labels)
                .map(|(x, label)| Sample { x, label })
                .collect(),
        );
        let (l, _) =
            loss_and_grad(&p, &batch, &LossSpec::CrossEntropy, &ClassWeights::uniform(3), None)
                .unwrap();
        let plain: f64 = xs
            .iter()
            .zip(labels)
            .map(|(x, y)| -log_softmax(&p.forward(x).unwrap())[y])
            .sum::<f64>()
            / 3.0;
        assert!((l - plain).abs() < 1e-12);
        // scaling all class weights leaves the weighted mean unchanged
        let (l2, _) = loss_and_grad(
            &p,
            &batch,
            &LossSpec::CrossEntropy,
            &ClassWeights::new(vec![0.2; 3]).unwrap(),
            None,
        )
        .unwrap();
        assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn neggrad_plus_alpha_one_is_plain_ce() {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let p = init_params(&arch, 9);
        let a = [0.3f32, -0.2, 0.8];
        let b = [-1.0f32, 0.5, 0.1];
        let c = [0.4f32, 0.4, -0.6];
        let w = ClassWeights::new(vec![0.25, 1.0]).unwrap();
        let mut batch = LossBatch::new(vec![Sample { x: &a, label: 0 }, Sample { x: &b, label: 1 }]);
        let ce = loss_and_grad(&p, &batch, &LossSpec::CrossEntropy, &w, None).unwrap();
        batch.secondary = vec![Sample { x: &c, label: 1 }];
        let ng = loss_and_grad(&p, &batch, &LossSpec::NegGradPlus { alpha: 1.0 }, &w, None).unwrap();
        assert_eq!(ce.0.to_bits(), ng.0.to_bits());
        assert_eq!(ce.1, ng.1);
    }

    #[test]
    fn distillation_without_reference_fails() {
        let arch = Architecture::new(vec![2, 2]).unwrap();
        let p = init_params(&arch, 1);
        let x = [1.0f32, 1.0];
        let batch = LossBatch::new(vec![Sample { x: &x, label: 0 }]);
        for spec in [
            LossSpec::MseDistill,
            LossSpec::CeSymKl,
            LossSpec::CeEntropyMse,
            LossSpec::KlDistill { temperature: 2.0, alpha: 1.0 },
        ] {
            let err = loss_and_grad(&p, &batch, &spec, &ClassWeights::uniform(2), None).unwrap_err();
            assert!(matches!(err, Error::MissingReference(_)), "{spec:?}");
        }
    }

    #[test]
    fn empty_batch_and_bad_params_rejected() {
        let arch = Architecture::new(vec![2, 2]).unwrap();
        let p = init_params(&arch, 1);
        let w = ClassWeights::uniform(2);
        assert!(loss_and_grad(&p, &LossBatch::default(), &LossSpec::CrossEntropy, &w, None).is_err());
        let x = [1.0f32, 1.0];
        let batch = LossBatch::new(vec![Sample { x: &x, label: 0 }]);
        assert!(loss_and_grad(&p, &batch, &LossSpec::NegGradPlus { alpha: 1.5 }, &w, None).is_err());
        assert!(loss_and_grad(&p, &batch, &LossSpec::Contrastive { temperature: 0.0 }, &w, None).is_err());
        // contrastive without a retain batch
        assert!(loss_and_grad(&p, &batch, &LossSpec::Contrastive { temperature: 1.0 }, &w, None).is_err());
    }

    #[test]
    fn overflowing_loss_is_an_error() {
        let arch = Architecture::new(vec![1, 2]).unwrap();
        let p = ModelParams::from_vec(&arch, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let x = [f32::INFINITY];
        let batch = LossBatch::new(vec![Sample { x: &x, label: 1 }]);
        let err = loss_and_grad(&p, &batch, &LossSpec::CrossEntropy, &ClassWeights::uniform(2), None)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    #[test]
    fn loss_spec_toml_shape() {
        #[derive(Deserialize, Serialize)]
        struct W {
            loss: LossSpec,
        }
        let w: W = toml::from_str("loss = { kind = \"kl_distill\", temperature = 4.0 }").unwrap();
        assert_eq!(w.loss, LossSpec::KlDistill { temperature: 4.0, alpha: 1.0 });
        let w: W = toml::from_str("loss = { kind = \"neggrad_plus\", alpha = 0.99 }").unwrap();
        assert_eq!(w.loss, LossSpec::NegGradPlus { alpha: 0.99 });
        assert!(toml::from_str::<W>("loss = { kind = \"kl_distill\", bogus = 1 }").is_err());
    }
}
