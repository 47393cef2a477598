//! Layer sets, parameter selectors and the saliency mask.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::nn::{loss_and_grad, Architecture, ClassWeights, LossBatch, LossSpec, ModelParams, ParamMask};
use crate::train::samples;
use crate::{rng, Error, Result};

/// A set of layers. Hidden layers are all but the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    All,
    Hidden,
    Output,
    /// Layer ids; negative ids count from the output layer (`-1`).
    Named { ids: Vec<isize> },
    /// `count` distinct layers drawn uniformly at random.
    Random { count: usize },
    /// The layers touched by the most recent reinit or noise phase.
    Selected,
}

impl LayerSet {
    pub fn resolve(&self, arch: &Architecture, last: Option<&ParamMask>, rng: &mut rng::Rng) -> Result<Vec<usize>> {
        let n = arch.num_layers();
        let mut layers: Vec<usize> = match self {
            LayerSet::All => (0..n).collect(),
            LayerSet::Hidden => (0..n - 1).collect(),
            LayerSet::Output => vec![n - 1],
            LayerSet::Named { ids } => ids
                .iter()
                .map(|&id| {
                    let l = if id < 0 { n as isize + id } else { id };
                    if (0..n as isize).contains(&l) {
                        Ok(l as usize)
                    } else {
                        Err(Error::invalid(format!("layer id {id} out of range for {n} layers")))
                    }
                })
                .collect::<Result<_>>()?,
            LayerSet::Random { count } => {
                if *count == 0 || *count > n {
                    return Err(Error::invalid(format!("cannot draw {count} of {n} layers")));
                }
                sample(rng, n, *count).into_vec()
            }
            LayerSet::Selected => {
                let mask = last.ok_or_else(|| Error::invalid("no earlier selection to refer to"))?;
                (0..n)
                    .filter(|&l| mask.as_slice()[arch.layer_range(l)].iter().any(|&b| b))
                    .collect()
            }
        };
        layers.sort_unstable();
        layers.dedup();
        Ok(layers)
    }
}

/// Flat indices of the weights (and optionally biases) of `layers`.
pub(crate) fn layer_indices(arch: &Architecture, layers: &[usize], include_bias: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for &l in layers {
        out.extend(arch.weight_range(l));
        if include_bias {
            out.extend(arch.bias_range(l));
        }
    }
    out
}

pub(crate) fn mask_of(arch: &Architecture, idx: &[usize]) -> ParamMask {
    let mut m = ParamMask::filled(arch, false);
    for &i in idx {
        m.as_mut_slice()[i] = true;
    }
    m
}

/// The `floor(frac * n)` candidates with the smallest scores, ties broken by
/// the lower index. Errors when `frac > 0` selects nothing.
pub fn bottom_fraction(candidates: &[usize], score: impl Fn(usize) -> f64, frac: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid("fraction must be in [0, 1]"));
    }
    let count = (frac * candidates.len() as f64).floor() as usize;
    if frac > 0.0 && count == 0 {
        return Err(Error::invalid(format!(
            "fraction {frac} of {} parameters selects none",
            candidates.len()
        )));
    }
    let mut keyed: Vec<(f64, usize)> = candidates.iter().map(|&i| (score(i), i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed.into_iter().take(count).map(|(_, i)| i).collect();
    out.sort_unstable();
    Ok(out)
}

/// The `floor(frac * n)` entries with the largest values, ties broken by the
/// lower index.
pub fn top_fraction(values: &[f64], frac: f64) -> Vec<usize> {
    let count = (frac.clamp(0.0, 1.0) * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Selection of the parameters a reinit phase re-draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Weights of `layers` with the smallest magnitude.
    WeightL1Bottom {
        frac: f64,
        #[serde(default = "all_layers")]
        layers: LayerSet,
    },
    /// Weights of `layers` with the smallest gradient magnitude of `probe`
    /// evaluated on the retain set (primary) and forget set (secondary).
    GradL1Bottom {
        frac: f64,
        probe: LossSpec,
        #[serde(default = "hidden_layers")]
        layers: LayerSet,
    },
    /// Every parameter of `count` random layers.
    RandomLayers { count: usize },
    /// Every parameter of the named layers.
    NamedLayers { ids: Vec<isize> },
    /// Every parameter of a layer set.
    Layers { layers: LayerSet },
}

fn all_layers() -> LayerSet {
    LayerSet::All
}

fn hidden_layers() -> LayerSet {
    LayerSet::Hidden
}

pub(crate) struct SelectCtx<'a> {
    pub ds: &'a Dataset,
    pub splits: &'a Splits,
    pub original: &'a ModelParams,
    pub weights: &'a ClassWeights,
    pub last: Option<&'a ParamMask>,
}

impl Selector {
    pub(crate) fn select(&self, params: &ModelParams, ctx: &SelectCtx, rng: &mut rng::Rng) -> Result<Vec<usize>> {
        let arch = params.arch();
        match self {
            Selector::WeightL1Bottom { frac, layers } => {
                let cand = layer_indices(arch, &layers.resolve(arch, ctx.last, rng)?, false);
                let p = params.as_slice();
                bottom_fraction(&cand, |i| (p[i] as f64).abs(), *frac)
            }
            Selector::GradL1Bottom { frac, probe, layers } => {
                let cand = layer_indices(arch, &layers.resolve(arch, ctx.last, rng)?, false);
                let mut batch = LossBatch::new(samples(ctx.ds, &ctx.splits.retain));
                batch.secondary = samples(ctx.ds, &ctx.splits.forget);
                let (_, g) = loss_and_grad(params, &batch, probe, ctx.weights, Some(ctx.original))?;
                let g = g.as_slice();
                bottom_fraction(&cand, |i| g[i].abs(), *frac)
            }
            Selector::RandomLayers { count } => {
                let layers = LayerSet::Random { count: *count }.resolve(arch, ctx.last, rng)?;
                Ok(layer_indices(arch, &layers, true))
            }
            Selector::NamedLayers { ids } => {
                let layers = LayerSet::Named { ids: ids.clone() }.resolve(arch, ctx.last, rng)?;
                Ok(layer_indices(arch, &layers, true))
            }
            Selector::Layers { layers } => Ok(layer_indices(arch, &layers.resolve(arch, ctx.last, rng)?, true)),
        }
    }
}

/// Parameters with the largest `|grad|` of forget-set cross-entropy at
/// `original` (the first step of gradient ascent), as a mask holding the top
/// `threshold` fraction.
pub fn salun_mask(original: &ModelParams, splits: &Splits, ds: &Dataset, threshold: f64) -> Result<ParamMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("saliency threshold must be in (0, 1)"));
    }
    let batch = LossBatch::new(samples(ds, &splits.forget));
    let weights = ClassWeights::uniform(ds.num_classes());
    let (_, g) = loss_and_grad(original, &batch, &LossSpec::CrossEntropy, &weights, None)?;
    let mags: Vec<f64> = g.as_slice().iter().map(|v| v.abs()).collect();
    Ok(mask_of(original.arch(), &top_fraction(&mags, threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bottom_half_of_known_magnitudes() {
        let mags = [7.0, 1.0, 10.0, 4.0, 2.0, 9.0, 3.0, 8.0, 5.0, 6.0];
        let cand: Vec<usize> = (0..10).collect();
        let sel = bottom_fraction(&cand, |i| mags[i], 0.5).unwrap();
        assert_eq!(sel.iter().map(|&i| mags[i]).collect::<Vec<_>>(), vec![1.0, 4.0, 2.0, 3.0, 5.0]);
        assert!(bottom_fraction(&cand, |i| mags[i], 0.0).unwrap().is_empty());
        assert!(bottom_fraction(&cand, |i| mags[i], 0.05).is_err());
    }

    #[test]
    fn top_half_of_gradient_magnitudes() {
        let g: Vec<f64> = (1..=10).map(f64::from).collect();
        let sel = top_fraction(&g, 0.5);
        assert_eq!(sel.iter().map(|&i| g[i]).collect::<Vec<_>>(), vec![6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(top_fraction(&vec![1.0; 1000], 0.999).len(), 999);
    }

    #[test]
    fn layer_sets() {
        let arch = Architecture::new(vec![3, 4, 5, 2]).unwrap();
        let mut r = rng::stream(0, "t");
        assert_eq!(LayerSet::Hidden.resolve(&arch, None, &mut r).unwrap(), vec![0, 1]);
        assert_eq!(LayerSet::Output.resolve(&arch, None, &mut r).unwrap(), vec![2]);
        assert_eq!(
            LayerSet::Named { ids: vec![0, -1] }.resolve(&arch, None, &mut r).unwrap(),
            vec![0, 2]
        );
        assert!(LayerSet::Named { ids: vec![3] }.resolve(&arch, None, &mut r).is_err());
        assert_eq!(LayerSet::Random { count: 2 }.resolve(&arch, None, &mut r).unwrap().len(), 2);
        assert!(LayerSet::Selected.resolve(&arch, None, &mut r).is_err());
        let m = mask_of(&arch, &[arch.bias_range(1).start]);
        assert_eq!(LayerSet::Selected.resolve(&arch, Some(&m), &mut r).unwrap(), vec![1]);
    }

    proptest! {
        #[test]
        fn selection_is_permutation_consistent(
            mags in prop::collection::vec(0.0f64..10.0, 1..60),
            frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = mags.len();
            let cand: Vec<usize> = (0..n).collect();
            let Ok(sel) = bottom_fraction(&cand, |i| mags[i], frac) else { return Ok(()); };
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, "perm"));
            let shuffled: Vec<f64> = perm.iter().map(|&p| mags[p]).collect();
            let sel2 = bottom_fraction(&cand, |i| shuffled[i], frac).unwrap();
            let mut a: Vec<f64> = sel.iter().map(|&i| mags[i]).collect();
            let mut b: Vec<f64> = sel2.iter().map(|&i| shuffled[i]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
