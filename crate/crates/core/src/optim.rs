//! AdamW with bias correction, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub hp: AdamWConfig,
}

impl OptimizerState {
    pub fn new(like: &Matrix, hp: AdamWConfig) -> Self {
        OptimizerState {
            m: Matrix::zeros(like.rows, like.cols),
            v: Matrix::zeros(like.rows, like.cols),
            step: 0,
            hp,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place.
pub fn optimizer_step(opt: &mut OptimizerState, params: &mut Matrix, grad: &Matrix) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&opt.m) {
        return Err(Error::Mismatch(format!(
            "optimizer shapes: params {}x{}, grad {}x{}, state {}x{}",
            params.rows, params.cols, grad.rows, grad.cols, opt.m.rows, opt.m.cols
        )));
    }
    let hp = opt.hp;
    opt.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(opt.step as i32);
    for (((p, g), m), v) in params
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(opt.m.data.iter_mut())
        .zip(opt.v.data.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * hp.weight_decay * *p;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Rescales `grad` to global L2 norm `max_norm` if it exceeds it. Returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut Matrix, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}
