use alloc::format;

use super::{JepaModel, Trainable};
use crate::{Error, Real, Result, Tensor};

/// AdamW and schedule hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub init_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Starting EMA decay of the target encoder.
    pub tau_base: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 3e-4,
            init_lr: 1e-6,
            warmup_steps: 1000,
            total_steps: 100_000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            tau_base: 0.996,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("optimizer: {msg}")));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || !(self.init_lr >= 0.0) {
            return bad("learning rates must be positive and finite");
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be smaller than a positive total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return bad("tau_base must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Whether weight decay applies to the parameter `name`: matrices only, never
/// biases, layer-norm parameters or the mask token.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One AdamW update of a single tensor. `t` is the 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    t: u64,
    decay: bool,
    cfg: &OptimizerConfig,
) {
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for i in 0..param.len() {
        let g = grad[i].to_f64();
        let mi = cfg.beta1 * m[i].to_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].to_f64() + (1.0 - cfg.beta2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let step = lr * (mi / bc1) / (libm::sqrt(vi / bc2) + cfg.eps);
        param[i] = T::from_f64(param[i].to_f64() * shrink - step);
    }
}

/// Apply AdamW to every trainable tensor of `model`. `step` counts completed
/// updates before this one. Nothing is modified if any gradient is non-finite.
pub fn adamw_step<T: Real>(
    model: &mut JepaModel<T>,
    grads: &Trainable<T>,
    m: &mut Trainable<T>,
    v: &mut Trainable<T>,
    step: u64,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    grads.check_same_layout(model)?;
    m.check_same_layout(model)?;
    v.check_same_layout(model)?;
    if let Some((name, _)) = grads.named().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name));
    }
    let t = step + 1;
    let params = model
        .ctx
        .iter_mut()
        .chain(model.pred.iter_mut())
        .map(|(n, p)| (decays(n), p))
        .chain(core::iter::once((false, &mut model.mask_token)));
    for (((decay, p), g), (m, v)) in params.zip(grads.tensors()).zip(m.tensors_mut().zip(v.tensors_mut())) {
        let p: &mut Tensor<T> = p;
        adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), lr, t, decay, cfg);
    }
    Ok(())
}
