//! Subject-structured datasets and their partitions.

mod csv_io;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::ClassWeights;
use crate::rng;
use crate::{Error, Result};

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f32>,
    pub label: usize,
    pub subject: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        let feature_dim = first.features.len();
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("feature dim and class count must be >= 1"));
        }
        for e in &examples {
            if e.features.len() != feature_dim {
                return Err(Error::Dimension {
                    expected: feature_dim,
                    got: e.features.len(),
                });
            }
            if e.label >= num_classes {
                return Err(Error::invalid(format!(
                    "label {} >= class count {num_classes}",
                    e.label
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in idx {
            counts[self.examples[i].label] += 1;
        }
        counts
    }

    /// Byte serialization of every value, fed to the store's config hash.
    pub(crate) fn digest_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (self.feature_dim * 4 + 12));
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        for e in &self.examples {
            out.extend_from_slice(&e.subject.to_le_bytes());
            out.extend_from_slice(&(e.label as u64).to_le_bytes());
            for f in &e.features {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }
}

/// Index sets of one dataset. `retain` and `forget` partition `train`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
}

impl Splits {
    /// Checks every partition invariant against `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let n = ds.len();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::invalid("train/val/test overlap or out of range"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("train/val/test do not cover the dataset"));
        }
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        let retain: BTreeSet<usize> = self.retain.iter().copied().collect();
        let forget: BTreeSet<usize> = self.forget.iter().copied().collect();
        if retain.len() != self.retain.len()
            || forget.len() != self.forget.len()
            || !retain.is_disjoint(&forget)
            || retain.union(&forget).copied().collect::<BTreeSet<_>>() != train
        {
            return Err(Error::invalid("retain/forget must partition train"));
        }
        let fs: BTreeSet<u32> = self.forget.iter().map(|&i| ds.get(i).subject).collect();
        if self.retain.iter().any(|&i| fs.contains(&ds.get(i).subject)) {
            return Err(Error::invalid("a subject occurs in both retain and forget"));
        }
        Ok(())
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    /// Inclusive range of examples per subject.
    pub examples_per_subject: (usize, usize),
    pub num_classes: usize,
    pub feature_dim: usize,
    pub imbalance_exponent: f64,
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    #[serde(default = "default_subject_sd")]
    pub subject_sd: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

fn default_class_sep() -> f64 {
    1.0
}
fn default_subject_sd() -> f64 {
    0.5
}
fn default_noise_sd() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(
        n_subjects: usize,
        examples_per_subject: (usize, usize),
        num_classes: usize,
        feature_dim: usize,
        imbalance_exponent: f64,
    ) -> Self {
        Self {
            n_subjects,
            examples_per_subject,
            num_classes,
            feature_dim,
            imbalance_exponent,
            class_sep: default_class_sep(),
            subject_sd: default_subject_sd(),
            noise_sd: default_noise_sd(),
        }
    }
}

/// Largest-remainder apportionment of `total` items over `weights`.
/// Ties in the remainder go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Generates a subject-structured classification dataset.
///
/// Class `k` receives a share of all examples proportional to
/// `(k + 1)^-imbalance_exponent` (largest-remainder rounding), so class 0
/// dominates for positive exponents. Subjects are laid out in random order and
/// labels are assigned in contiguous blocks, so most subjects are
/// single-class. Each feature vector is
/// `class_mean[label] + subject_offset + noise`, with
/// `class_mean ~ N(0, class_sep^2 I)`, `subject_offset ~ N(0, subject_sd^2 I)`
/// and `noise ~ N(0, noise_sd^2 I)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let (lo, hi) = spec.examples_per_subject;
    if spec.n_subjects == 0 || lo == 0 || hi < lo || spec.num_classes == 0 || spec.feature_dim == 0 {
        return Err(Error::invalid("all counts must be positive and the subject range ordered"));
    }
    if !(spec.imbalance_exponent >= 0.0)
        || !(spec.class_sep >= 0.0)
        || !(spec.subject_sd >= 0.0)
        || !(spec.noise_sd >= 0.0)
    {
        return Err(Error::invalid("exponent and scales must be >= 0"));
    }
    let normal = |sd: f64| Normal::new(0.0, sd).expect("sd validated");
    let d = spec.feature_dim;

    let mut size_rng = rng::stream(seed, "subject_sizes");
    let sizes: Vec<usize> = (0..spec.n_subjects)
        .map(|_| size_rng.random_range(lo..=hi))
        .collect();
    let total: usize = sizes.iter().sum();

    let weights: Vec<f64> = (0..spec.num_classes)
        .map(|k| ((k + 1) as f64).powf(-spec.imbalance_exponent))
        .collect();
    let counts = apportion(total, &weights);
    let mut labels = Vec::with_capacity(total);
    for (k, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(k, c));
    }

    let mut order: Vec<usize> = (0..spec.n_subjects).collect();
    order.shuffle(&mut rng::stream(seed, "subject_order"));

    let mut mean_rng = rng::stream(seed, "class_means");
    let class_dist = normal(spec.class_sep);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..d).map(|_| class_dist.sample(&mut mean_rng)).collect())
        .collect();

    let mut offset_rng = rng::stream(seed, "subject_offsets");
    let mut noise_rng = rng::stream(seed, "noise");
    let subject_dist = normal(spec.subject_sd);
    let noise_dist = normal(spec.noise_sd);
    let mut examples = Vec::with_capacity(total);
    let mut pos = 0;
    for &s in &order {
        let offset: Vec<f64> = (0..d).map(|_| subject_dist.sample(&mut offset_rng)).collect();
        for _ in 0..sizes[s] {
            let label = labels[pos];
            pos += 1;
            let features = (0..d)
                .map(|j| (means[label][j] + offset[j] + noise_dist.sample(&mut noise_rng)) as f32)
                .collect();
            examples.push(Example {
                features,
                label,
                subject: s as u32,
            });
        }
    }
    Dataset::new(examples, spec.num_classes)
}

/// Uniform random example-level partition into train/val/test.
///
/// `n_train = round(f0 n)`, `n_val = round(f1 n)`, test takes the rest. The
/// returned splits have `retain = train` and an empty forget set.
pub fn split_train_val_test(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
    }
    let n = ds.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "split sizes {n_train}/{n_val}/{n_test}: every split needs >= 1 example"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let take = |range: std::ops::Range<usize>| {
        let mut v = idx[range].to_vec();
        v.sort_unstable();
        v
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok(Splits {
        retain: train.clone(),
        train,
        val,
        test,
        forget: Vec::new(),
    })
}

/// Subject-disjoint retain/forget partition of `train`.
///
/// Subjects are visited in seeded random order and whole subjects are moved
/// to the forget set until it first holds `>= forget_fraction * |train|`
/// examples. Returns sorted `(retain, forget)`.
pub fn split_retain_forget(
    ds: &Dataset,
    train: &[usize],
    forget_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(Error::invalid("forget fraction must be in (0, 1)"));
    }
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_subject.entry(ds.get(i).subject).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::invalid("training set needs at least two subjects"));
    }
    let mut subjects: Vec<u32> = by_subject.keys().copied().collect();
    subjects.shuffle(&mut rng::stream(seed, "forget_subjects"));
    let target = forget_fraction * train.len() as f64;
    let mut forget = Vec::new();
    for s in subjects {
        if forget.len() as f64 >= target {
            break;
        }
        forget.extend_from_slice(&by_subject[&s]);
    }
    if forget.len() == train.len() {
        return Err(Error::invalid("forget set would consume the whole training set"));
    }
    forget.sort_unstable();
    let fset: BTreeSet<usize> = forget.iter().copied().collect();
    let mut retain: Vec<usize> = train.iter().copied().filter(|i| !fset.contains(i)).collect();
    retain.sort_unstable();
    Ok((retain, forget))
}

/// Train/val/test split followed by the retain/forget split.
pub fn make_splits(ds: &Dataset, fractions: [f64; 3], forget_fraction: f64, seed: u64) -> Result<Splits> {
    let mut s = split_train_val_test(ds, fractions, seed)?;
    let (retain, forget) = split_retain_forget(ds, &s.train, forget_fraction, seed)?;
    s.retain = retain;
    s.forget = forget;
    Ok(s)
}

/// `weight_k = 1 / count_k` over `idx`.
pub fn class_weights(ds: &Dataset, idx: &[usize]) -> Result<ClassWeights> {
    let counts = ds.class_counts(idx);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::AbsentClass(k));
    }
    ClassWeights::new(counts.iter().map(|&c| 1.0 / c as f64).collect())
}
