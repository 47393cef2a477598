//! Binned forgetting quality, the utility-adjusted final score and two
//! comparison metrics (accuracy gap, membership-inference gap).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinIndexing {
    /// `n = floor(eps / width) + 1`, so `H <= 1`.
    FloorPlusOne,
    /// `n = floor(eps / width)`, so the first bin is worth 2 points.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinningConfig {
    pub bin_width: f64,
    pub bins: u32,
    pub indexing: BinIndexing,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            bin_width: 0.5,
            bins: 13,
            indexing: BinIndexing::FloorPlusOne,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) || self.bins == 0 {
            return Err(Error::invalid("bin width must be > 0 and bins >= 1"));
        }
        Ok(())
    }

    /// Upper end of the last bin; estimates at or above it score nothing.
    pub fn range(&self) -> f64 {
        self.bins as f64 * self.bin_width
    }
}

/// Points `2 / 2^n` for the bin `n` holding `eps`; 0 past the last bin.
pub fn h_points(eps: f64, cfg: &BinningConfig) -> f64 {
    if !(eps < cfg.range()) {
        return 0.0;
    }
    let k = (eps.max(0.0) / cfg.bin_width).floor() as i32;
    let n = match cfg.indexing {
        BinIndexing::FloorPlusOne => k + 1,
        BinIndexing::Floor => k,
    };
    2.0 / 2f64.powi(n)
}

pub fn forgetting_quality(eps: &[f64], cfg: &BinningConfig) -> Result<f64> {
    cfg.validate()?;
    if eps.is_empty() {
        return Err(Error::invalid("forgetting quality of an empty forget set"));
    }
    if eps.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::invalid("epsilon values must be >= 0 or +inf"));
    }
    Ok(eps.iter().map(|&e| h_points(e, cfg)).sum::<f64>() / eps.len() as f64)
}

/// `F * (retain_u / retain_r) * (test_u / test_r)`, ratios uncapped.
pub fn final_score(f: f64, retain_acc_u: f64, retain_acc_r: f64, test_acc_u: f64, test_acc_r: f64) -> Result<f64> {
    if !(retain_acc_r > 0.0 && test_acc_r > 0.0) {
        return Err(Error::invalid("retrained accuracies must be > 0"));
    }
    Ok(f * (retain_acc_u / retain_acc_r) * (test_acc_u / test_acc_r))
}

pub fn accuracy_gap(forget_acc_u: f64, forget_acc_r: f64) -> f64 {
    (forget_acc_u - forget_acc_r).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaGap {
    pub score_unlearned: f64,
    pub score_retrained: f64,
    pub gap: f64,
}

const LOGREG_TOL: f64 = 1e-8;
const LOGREG_MAX_ITERS: usize = 5000;

/// Logistic regression `P(forget | x) = sigmoid(w x + b)` by full-batch
/// gradient descent on the mean log-loss, stopping once both partial
/// derivatives fall below the tolerance.
fn fit_logistic(x: &[f64], y: &[bool]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mut w, mut b) = (0.0f64, 0.0f64);
    for _ in 0..LOGREG_MAX_ITERS {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(w * xi + b)).exp());
            let d = p - f64::from(u8::from(yi));
            gw += d * xi;
            gb += d;
        }
        gw /= n;
        gb /= n;
        if gw.abs() < LOGREG_TOL && gb.abs() < LOGREG_TOL {
            break;
        }
        w -= gw;
        b -= gb;
    }
    (w, b)
}

/// Mean held-out accuracy of the single-feature classifier separating
/// `forget` (positive) from `test` losses under stratified k-fold CV.
fn mia_score(forget: &[f64], test: &[f64], folds: usize, seed: u64) -> f64 {
    let n = forget.len().min(test.len());
    let mut sub = rng::stream(seed, "mia_balance");
    let mut pick = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut sub);
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i]).collect::<Vec<f64>>()
    };
    let pos = pick(forget);
    let neg = pick(test);

    let mut fold_rng = rng::stream(seed, "mia_folds");
    let mut assign = |len: usize| {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut fold_rng);
        let mut fold = vec![0; len];
        for (rank, &i) in idx.iter().enumerate() {
            fold[i] = rank % folds;
        }
        fold
    };
    let fold_pos = assign(n);
    let fold_neg = assign(n);

    let mut total = 0.0;
    for k in 0..folds {
        let mut x = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(2 * n);
        let mut hx = Vec::new();
        let mut hy = Vec::new();
        for (vals, folds_of, label) in [(&pos, &fold_pos, true), (&neg, &fold_neg, false)] {
            for (v, &f) in vals.iter().zip(folds_of.iter()) {
                if f == k {
                    hx.push(*v);
                    hy.push(label);
                } else {
                    x.push(*v);
                    y.push(label);
                }
            }
        }
        let mu = crate::stats::mean(&x);
        let sd = crate::stats::sample_sd(&x);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let xs: Vec<f64> = x.iter().map(|v| (v - mu) / sd).collect();
        let (w, b) = fit_logistic(&xs, &y);
        let correct = hx
            .iter()
            .zip(&hy)
            .filter(|(v, &lab)| (w * ((*v - mu) / sd) + b > 0.0) == lab)
            .count();
        total += correct as f64 / hx.len() as f64;
    }
    total / folds as f64
}

/// Gap between the two worlds' membership-inference accuracies. Each world
/// first subsamples its longer list (seeded) to the length of the shorter.
pub fn mia_gap(
    losses_u_forget: &[f64],
    losses_u_test: &[f64],
    losses_r_forget: &[f64],
    losses_r_test: &[f64],
    folds: usize,
    seed: u64,
) -> Result<MiaGap> {
    if folds < 2 {
        return Err(Error::invalid("need >= 2 folds"));
    }
    for l in [losses_u_forget, losses_u_test, losses_r_forget, losses_r_test] {
        if l.len() < folds {
            return Err(Error::invalid(format!("{} losses for {folds} folds", l.len())));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("losses must be finite"));
        }
    }
    let su = mia_score(losses_u_forget, losses_u_test, folds, seed);
    let sr = mia_score(losses_r_forget, losses_r_test, folds, seed);
    Ok(MiaGap {
        score_unlearned: su,
        score_retrained: sr,
        gap: (su - sr).abs(),
    })
}

/// Result of scoring one estimate (one set of N unlearned and N retrained models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    #[serde(with = "inf_as_text")]
    pub epsilons: Vec<f64>,
    pub forgetting_quality: f64,
    pub retain_acc_unlearned: f64,
    pub retain_acc_retrained: f64,
    pub test_acc_unlearned: f64,
    pub test_acc_retrained: f64,
    pub forget_acc_unlearned: f64,
    pub forget_acc_retrained: f64,
    pub final_score: f64,
    /// Forget examples for which every attack rule was discarded.
    pub all_discarded: usize,
    /// Unlearning runs that exceeded the runtime budget.
    pub over_budget: usize,
    pub warnings: Vec<String>,
}

impl Scorecard {
    pub fn accuracy_gap(&self) -> f64 {
        accuracy_gap(self.forget_acc_unlearned, self.forget_acc_retrained)
    }
}

/// JSON has no infinity; non-finite entries are written as `"inf"`,
/// `"-inf"` or `"nan"`.
pub(crate) mod inf_as_text {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| match x {
                x if x.is_finite() => Repr::Num(x),
                x if x.is_nan() => Repr::Text("nan".into()),
                x if x > 0.0 => Repr::Text("inf".into()),
                _ => Repr::Text("-inf".into()),
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    other => Err(D::Error::custom(format!("not a number: {other}"))),
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut g = rng::stream(seed, "normals");
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut g);
                z + shift
            })
            .collect()
    }

    #[test]
    fn points_per_bin() {
        let c = BinningConfig::default();
        assert_eq!(h_points(0.0, &c), 1.0);
        assert_eq!(h_points(0.7, &c), 0.5);
        assert_eq!(h_points(6.49, &c), 2.0 / 2f64.powi(13));
        assert_eq!(h_points(6.5, &c), 0.0);
        assert_eq!(h_points(f64::INFINITY, &c), 0.0);
        let floor = BinningConfig {
            indexing: BinIndexing::Floor,
            ..c
        };
        assert_eq!(h_points(0.2, &floor), 2.0);
        assert_eq!(h_points(0.7, &floor), 1.0);
    }

    #[test]
    fn forgetting_quality_examples() {
        let c = BinningConfig::default();
        assert_eq!(forgetting_quality(&[0.0; 5], &c).unwrap(), 1.0);
        assert_eq!(forgetting_quality(&[0.0, 0.7], &c).unwrap(), 0.75);
        assert_eq!(forgetting_quality(&[f64::INFINITY; 3], &c).unwrap(), 0.0);
        assert!(forgetting_quality(&[], &c).is_err());
    }

    #[test]
    fn final_score_examples() {
        assert_eq!(final_score(0.37, 0.8, 0.8, 0.6, 0.6).unwrap(), 0.37);
        assert!((final_score(0.4, 0.95, 1.0, 0.9, 1.0).unwrap() - 0.342).abs() < 1e-12);
        assert!(final_score(0.4, 0.9, 0.0, 0.9, 0.9).is_err());
        // no cap on ratios above one
        assert!(final_score(0.5, 1.0, 0.5, 1.0, 1.0).unwrap() > 0.99);
    }

    #[test]
    fn accuracy_gap_examples() {
        assert!((accuracy_gap(0.936, 0.856) - 0.080).abs() < 1e-12);
        assert_eq!(accuracy_gap(0.4, 0.4), 0.0);
        assert_eq!(accuracy_gap(1.0, 0.0), 1.0);
    }

    #[test]
    fn mia_null_and_separable() {
        let g = mia_gap(
            &normals(1, 1000, 0.0),
            &normals(2, 1000, 0.0),
            &normals(3, 1000, 0.0),
            &normals(4, 1000, 0.0),
            10,
            7,
        )
        .unwrap();
        assert!(g.gap <= 0.05, "{g:?}");
        assert!((g.score_unlearned - 0.5).abs() < 0.05);

        let g = mia_gap(
            &normals(1, 300, -50.0),
            &normals(2, 300, 0.0),
            &normals(3, 300, 0.0),
            &normals(4, 300, 0.0),
            10,
            7,
        )
        .unwrap();
        assert!(g.score_unlearned > 0.99);
        assert!((g.gap - 0.5).abs() < 0.1, "{g:?}");

        let a = normals(5, 50, 0.3);
        let b = normals(6, 70, 0.0);
        assert_eq!(mia_gap(&a, &b, &a, &b, 10, 1).unwrap().gap, 0.0);
        assert!(mia_gap(&a[..5], &b, &a, &b, 10, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn h_points_non_increasing(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let c = BinningConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(h_points(lo, &c) >= h_points(hi, &c));
        }

        #[test]
        fn quality_is_monotone_and_bounded(
            eps in prop::collection::vec(0.0f64..8.0, 1..30),
            shrink in prop::collection::vec(0.0f64..1.0, 30),
        ) {
            let c = BinningConfig::default();
            let smaller: Vec<f64> = eps.iter().zip(&shrink).map(|(e, s)| e * s).collect();
            let f = forgetting_quality(&eps, &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(forgetting_quality(&smaller, &c).unwrap() >= f);
        }

        #[test]
        fn final_score_linear_in_f(f in 0.0f64..1.0, ru in 0.1f64..1.0, tu in 0.1f64..1.0) {
            let s1 = final_score(f, ru, 0.8, tu, 0.7).unwrap();
            let s2 = final_score(2.0 * f, ru, 0.8, tu, 0.7).unwrap();
            prop_assert!((s2 - 2.0 * s1).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn mia_symmetric_and_affine_invariant(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let uf = normals(seed, 60, -0.5);
            let ut = normals(seed + 1, 60, 0.0);
            let rf = normals(seed + 2, 60, -0.1);
            let rt = normals(seed + 3, 60, 0.0);
            let g = mia_gap(&uf, &ut, &rf, &rt, 10, seed).unwrap();
            let swapped = mia_gap(&rf, &rt, &uf, &ut, 10, seed).unwrap();
            prop_assert_eq!(g.gap, swapped.gap);
            let t = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<f64>>();
            let ga = mia_gap(&t(&uf), &t(&ut), &t(&rf), &t(&rt), 10, seed).unwrap();
            prop_assert!((ga.gap - g.gap).abs() <= 1e-3, "{} vs {}", ga.gap, g.gap);
        }
    }
}
