use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
        }
    }
}

/// One AdamW step: bias-corrected Adam update, then `p ← p − lr·wd·p`.
pub fn adamw_step<T: Scalar>(
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    wd: f64,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - T::lit(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::lit(cfg.beta2.powi(state.t as i32));
    let (lr_t, decay, eps) = (T::lit(lr), T::lit(lr * wd), T::lit(cfg.eps));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * gv;
        v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        *pv -= lr_t * mh / (vh.sqrt() + eps);
        *pv -= decay * *pv;
    }
}
