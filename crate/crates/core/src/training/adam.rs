use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::tensor::{Float, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per weight plus the step count used
/// for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected adaptive-moment update of every weight selected by
/// `update`. Selected weights missing from `grads` are treated as having a
/// zero gradient; unselected weights and their moments are left untouched.
pub fn adam_step<T: Float>(
    params: &mut Params<T>,
    state: &mut AdamState<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &AdamConfig,
    update: impl Fn(&str) -> bool,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let w = params
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("gradient for unknown weight {name}")))?;
        if w.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "gradient of {name} has shape {:?}, weight {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64c(cfg.beta1), T::from_f64c(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::from_f64c(1.0 - cfg.beta1.powi(t));
    let corr2 = T::from_f64c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64c(cfg.lr), T::from_f64c(cfg.eps));
    for (name, w) in params.iter_mut() {
        if !update(name) {
            continue;
        }
        let m = state.m.get_mut(name).expect("moments follow the layout");
        let v = state.v.get_mut(name).expect("moments follow the layout");
        let g = grads.get(name).map(Tensor::data);
        for i in 0..w.numel() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            let mi = b1 * m.data()[i] + c1 * gi;
            let vi = b2 * v.data()[i] + c2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = lr * (mi / corr1) / ((vi / corr2).sqrt() + eps);
            w.data_mut()[i] -= step;
        }
    }
    Ok(())
}
