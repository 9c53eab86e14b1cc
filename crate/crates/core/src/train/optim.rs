use indexmap::IndexMap;

use crate::autodiff::{ParamKind, ParamSet};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;

/// Step size for `epoch` (0-based) of `total_epochs`: `base` for the first
/// half, `base/10` until three quarters, `base/100` after. Boundaries are
/// `total/2` and `3·total/4` with integer division.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if epoch < total_epochs / 2 {
        base_lr
    } else if epoch < 3 * total_epochs / 4 {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    }
}

/// Momentum buffers for every trainable parameter, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub velocity: IndexMap<String, Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl<T: Float> OptState<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64, base_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if weight_decay < 0.0 || base_lr < 0.0 {
            return Err(Error::invalid("weight decay and learning rate must be non-negative"));
        }
        let velocity = params
            .iter()
            .filter(|(_, _, p)| p.trainable())
            .map(|(_, name, p)| Ok((name.to_string(), Tensor::zeros(p.value.shape())?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            velocity,
            momentum,
            weight_decay,
            base_lr,
        })
    }
}

/// One Nesterov update of every trainable parameter from its accumulated
/// gradient:
///
/// ```text
/// g = grad + λ·p      (λ only for ParamKind::Weight)
/// v = μ·v + g
/// p = p − lr·(g + μ·v)
/// ```
pub fn nesterov_step<T: Float>(params: &mut ParamSet<T>, state: &mut OptState<T>, lr: f64) -> Result<()> {
    let mu = T::from_f64(state.momentum);
    let lr = T::from_f64(lr);
    for id in params.trainable_ids() {
        let name = params.name(id).to_string();
        let v = state
            .velocity
            .get_mut(&name)
            .ok_or_else(|| Error::invalid(format!("no velocity for parameter `{name}`")))?;
        let p = params.get_mut(id);
        let decay = T::from_f64(if p.kind == ParamKind::Weight { state.weight_decay } else { 0.0 });
        let grad = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(name.clone()))?;
        if grad.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "nesterov_step",
                left: p.value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        for ((w, &dw), vel) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            let g = dw + decay * *w;
            *vel = mu * *vel + g;
            *w -= lr * (g + mu * *vel);
        }
    }
    Ok(())
}
