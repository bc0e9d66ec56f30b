//! AdamW with decoupled weight decay and a per-epoch cosine schedule.

use std::collections::BTreeMap;

use crate::autodiff::Parameter;
use crate::config::OptimizerConfig;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), step: 0 }
    }
}

/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(
    param: &mut Parameter<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grad.shape() != param.value.shape() || state.m.shape() != param.value.shape() {
        return Err(shape_err!(
            "{}: gradient {:?} / state {:?} vs parameter {:?}",
            param.name,
            grad.shape(),
            state.m.shape(),
            param.value.shape()
        ));
    }
    if !param.trainable {
        return Ok(());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (ob1, ob2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let decay = T::from_f64_lossy(1.0 - lr * cfg.weight_decay);
    let step_size = T::from_f64_lossy(lr / c1);
    let inv_sqrt_c2 = T::from_f64_lossy(1.0 / c2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);
    let p = param.value.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = tb1 * m[i] + ob1 * g;
        v[i] = tb2 * v[i] + ob2 * g * g;
        let denom = v[i].sqrt() * inv_sqrt_c2 + eps;
        p[i] = p[i] * decay - step_size * m[i] / denom;
    }
    param.value.check_finite(&param.name)
}

/// AdamW state for a set of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW<T> {
    pub states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        AdamW { states: BTreeMap::new() }
    }

    pub fn step(&mut self, param: &mut Parameter<T>, grad: &Tensor<T>, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        let state = self
            .states
            .entry(param.name.clone())
            .or_insert_with(|| AdamState::new(param.value.shape()));
        adamw_step(param, grad, state, lr, cfg)
    }

    /// Drops the state of parameters whose name starts with `prefix`.
    pub fn reset(&mut self, prefix: &str) {
        self.states.retain(|k, _| !k.starts_with(prefix));
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/T_max))`.
pub fn cosine_lr(epoch: usize, t_max: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t_max == 0 {
        return Ok(lr_max);
    }
    if epoch > t_max {
        return Err(invalid!("epoch {} beyond schedule period {}", epoch, t_max));
    }
    let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}
