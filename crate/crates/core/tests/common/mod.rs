//! Oracles shared by the integration tests.
#![allow(dead_code)]

use forgetbench::nn::{loss_and_grad, Architecture, ClassWeights, LossBatch, LossSpec, ModelParams, Sample};
use forgetbench::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Exhaustive search over every single-threshold rule `x > t` and every
/// interval rule `t1 < x <= t2` on the pooled distinct values, both
/// orientations. `None` when every rule is discarded.
pub fn brute_force_epsilon(u: &[f64], r: &[f64], delta: f64) -> Option<f64> {
    fn eps(fpr: f64, fnr: f64, delta: f64) -> Option<f64> {
        if fpr == 0.0 && fnr == 0.0 {
            return Some(f64::INFINITY);
        }
        if fpr == 0.0 || fnr == 0.0 {
            return None;
        }
        let a = (1.0 - delta - fpr > 0.0).then(|| ((1.0 - delta - fpr) / fnr).ln());
        let b = (1.0 - delta - fnr > 0.0).then(|| ((1.0 - delta - fnr) / fpr).ln());
        match (a, b) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
    let mut ts: Vec<f64> = u.iter().chain(r).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut rules: Vec<Box<dyn Fn(f64) -> bool>> = Vec::new();
    for &t in &ts {
        rules.push(Box::new(move |x| x > t));
    }
    let mut lows = vec![f64::NEG_INFINITY];
    lows.extend(&ts);
    for &t1 in &lows {
        for &t2 in ts.iter().filter(|&&t| t > t1) {
            rules.push(Box::new(move |x| t1 < x && x <= t2));
        }
    }
    let mut best: Option<f64> = None;
    for rule in &rules {
        for flip in [false, true] {
            let fpr = r.iter().filter(|&&x| rule(x) != flip).count() as f64 / r.len() as f64;
            let fnr = u.iter().filter(|&&x| rule(x) == flip).count() as f64 / u.len() as f64;
            if let Some(e) = eps(fpr, fnr, delta) {
                best = Some(best.map_or(e, |b: f64| b.max(e)));
            }
        }
    }
    best
}

pub const GRAD_STEP: f32 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor: below this magnitude the comparison is absolute, since
/// f64 round-off in the loss divided by the step reaches about 1e-12.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Draws whose hidden pre-activations (or, for the L1 term, parameters) lie
/// this close to a kink are redrawn.
pub const KINK_MARGIN: f64 = 2e-3;

pub fn loss_variants() -> Vec<LossSpec> {
    vec![
        LossSpec::CrossEntropy,
        LossSpec::CeEntropyMse,
        LossSpec::CeSymKl,
        LossSpec::KlDistill { temperature: 2.0, alpha: 0.7 },
        LossSpec::MseDistill,
        LossSpec::UniformKl,
        LossSpec::Contrastive { temperature: 0.5 },
        LossSpec::NegGradPlus { alpha: 0.8 },
        LossSpec::L1Ce { l1_weight: 0.05 },
    ]
}

fn draw_params(arch: &Architecture, r: &mut rng::Rng) -> ModelParams {
    let n = Normal::new(0.0, 0.8).unwrap();
    let v = (0..arch.num_params()).map(|_| n.sample(r) as f32).collect();
    ModelParams::from_vec(arch, v).unwrap()
}

fn near_relu_kink(p: &ModelParams, xs: &[Vec<f32>]) -> bool {
    let (n_in, n_out) = p.arch().layer_shape(0);
    xs.iter().any(|x| {
        (0..n_out).any(|o| {
            let s: f64 = p.bias(0)[o] as f64
                + (0..n_in).map(|i| p.weights(0)[o * n_in + i] as f64 * x[i] as f64).sum::<f64>();
            s.abs() < KINK_MARGIN
        })
    })
}

/// Largest elementwise relative error between analytic gradients and central
/// differences over `draws` random `[3, 4, 2]` networks and batches.
pub fn worst_gradient_error(spec: &LossSpec, draws: usize, seed: u64) -> f64 {
    let arch = Architecture::new(vec![3, 4, 2]).unwrap();
    let feat = Normal::new(0.0, 1.0).unwrap();
    let mut r = rng::stream(seed, spec.name());
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < draws {
        let xs: Vec<Vec<f32>> = (0..9).map(|_| (0..3).map(|_| feat.sample(&mut r) as f32).collect()).collect();
        let labels: Vec<usize> = (0..9).map(|_| r.random_range(0..2)).collect();
        let params = draw_params(&arch, &mut r);
        let reference = draw_params(&arch, &mut r);
        let weights = ClassWeights::new(vec![r.random_range(0.2..2.0), r.random_range(0.2..2.0)]).unwrap();
        if near_relu_kink(&params, &xs) {
            continue;
        }
        if matches!(spec, LossSpec::L1Ce { .. }) && params.as_slice().iter().any(|v| (v.abs() as f64) < KINK_MARGIN) {
            continue;
        }
        let mut batch = LossBatch::new((0..5).map(|i| Sample { x: &xs[i], label: labels[i] }).collect());
        batch.secondary = (5..9).map(|i| Sample { x: &xs[i], label: labels[i] }).collect();
        if done % 2 == 1 {
            batch.example_weights = Some((0..5).map(|_| r.random_range(0.05..1.0)).collect());
        }
        let (_, grad) = loss_and_grad(&params, &batch, spec, &weights, Some(&reference)).unwrap();
        for i in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.as_mut_slice()[i] += GRAD_STEP;
            minus.as_mut_slice()[i] -= GRAD_STEP;
            // divide by the perturbation actually representable in f32
            let h = plus.as_slice()[i] as f64 - minus.as_slice()[i] as f64;
            let lp = loss_and_grad(&plus, &batch, spec, &weights, Some(&reference)).unwrap().0;
            let lm = loss_and_grad(&minus, &batch, spec, &weights, Some(&reference)).unwrap().0;
            let numeric = (lp - lm) / h;
            let analytic = grad.as_slice()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
        done += 1;
    }
    worst
}
