use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, ParamSet};
use crate::{Error, Result};

/// Momentum buffers, one per parameter, zero-initialized.
pub type OptimizerState = ParamSet<f64>;

impl OptimizerState {
    pub fn for_params(params: &ModelParams) -> Self {
        Self::filled(params.arch(), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v     <- momentum * v + (grad + weight_decay * theta)
/// theta <- theta - lr * m * v
/// ```
///
/// `m` is the per-parameter multiplier from `lr_scale` (1 when absent).
/// Parameters whose multiplier is exactly zero are left bit-identical.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &SgdConfig,
    lr_scale: Option<&ParamSet<f64>>,
) -> Result<()> {
    cfg.validate()?;
    if !params.same_shape(grads) || !params.same_shape(state) {
        return Err(Error::ArchitectureMismatch("gradient/state shape differs from params".into()));
    }
    if let Some(s) = lr_scale {
        if !params.same_shape(s) {
            return Err(Error::ArchitectureMismatch("lr multipliers shape differs".into()));
        }
    }
    let theta = params.as_mut_slice();
    let v = state.as_mut_slice();
    let g = grads.as_slice();
    for i in 0..theta.len() {
        let scale = lr_scale.map_or(1.0, |s| s.as_slice()[i]);
        if scale == 0.0 {
            continue;
        }
        let t = theta[i] as f64;
        v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * t);
        theta[i] = (t - cfg.lr * scale * v[i]) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture};

    fn scalar_net(theta: f32) -> ModelParams {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        ModelParams::from_vec(&arch, vec![theta, theta]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let mut p = init_params(&arch, 4);
        let before = p.clone();
        let mut st = OptimizerState::for_params(&p);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_momentum_step(&mut p, &Gradients::zeros(&arch), &mut st, &cfg, None).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_momentum_steps() {
        // theta = 1 - 0.1*1 - 0.1*(0.9*1 + 1) = 0.71
        let mut p = scalar_net(1.0);
        let g = Gradients::filled(p.arch(), 1.0);
        let mut st = OptimizerState::for_params(&p);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_momentum_step(&mut p, &g, &mut st, &cfg, None).unwrap();
        sgd_momentum_step(&mut p, &g, &mut st, &cfg, None).unwrap();
        assert!((p.as_slice()[0] as f64 - 0.71).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only() {
        // theta' = 2 - 0.1 * (0.5 * 2) = 1.9
        let mut p = scalar_net(2.0);
        let g = Gradients::zeros(p.arch());
        let mut st = OptimizerState::for_params(&p);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        sgd_momentum_step(&mut p, &g, &mut st, &cfg, None).unwrap();
        assert!((p.as_slice()[0] as f64 - 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_multiplier_freezes_parameter() {
        let mut p = scalar_net(0.3);
        let g = Gradients::filled(p.arch(), 5.0);
        let mut st = OptimizerState::for_params(&p);
        let scale = ParamSet::from_vec(p.arch(), vec![0.0, 1.0]).unwrap();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        sgd_momentum_step(&mut p, &g, &mut st, &cfg, Some(&scale)).unwrap();
        assert_eq!(p.as_slice()[0].to_bits(), 0.3f32.to_bits());
        assert_ne!(p.as_slice()[1], 0.3);
    }

    #[test]
    fn invalid_hyperparameters() {
        let mut p = scalar_net(1.0);
        let g = Gradients::zeros(p.arch());
        let mut st = OptimizerState::for_params(&p);
        for cfg in [
            SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 0.0 },
            SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 },
            SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: -1.0 },
        ] {
            assert!(sgd_momentum_step(&mut p, &g, &mut st, &cfg, None).is_err());
        }
        let other = Gradients::zeros(&Architecture::new(vec![2, 1]).unwrap());
        let cfg = SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0 };
        assert!(sgd_momentum_step(&mut p, &other, &mut st, &cfg, None).is_err());
    }
}
