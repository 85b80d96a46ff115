//! Full-batch Adam with L2 weight decay.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the weights instead of the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m_w: Mat<T>,
    pub v_w: Mat<T>,
    pub m_v: Mat<T>,
    pub v_v: Mat<T>,
    pub t: u64,
}

/// Applied parameter changes `new − old`.
#[derive(Debug, Clone)]
pub struct Deltas<T> {
    pub dw: Mat<T>,
    pub dv: Mat<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &Params<T>) -> Self {
        let (wr, wc) = (params.w.nrows(), params.w.ncols());
        let (vr, vc) = (params.v.nrows(), params.v.ncols());
        AdamState {
            config,
            m_w: Mat::zeros(wr, wc),
            v_w: Mat::zeros(wr, wc),
            m_v: Mat::zeros(vr, vc),
            v_v: Mat::zeros(vr, vc),
            t: 0,
        }
    }

    /// One optimizer step; mutates `params` and returns the applied deltas.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Grads<T>) -> Result<Deltas<T>> {
        self.step_blocks(params, &grads.dw, &grads.dv)
    }

    /// [`step`](Self::step) taking the two gradient blocks directly.
    pub fn step_blocks(&mut self, params: &mut Params<T>, dw: &Mat<T>, dv: &Mat<T>) -> Result<Deltas<T>> {
        check_finite(dw, "dW")?;
        check_finite(dv, "dV")?;
        self.t += 1;
        let cfg = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let k = Coeffs {
            b1: T::lift(cfg.beta1),
            b2: T::lift(cfg.beta2),
            one_m_b1: T::lift(1.0 - cfg.beta1),
            one_m_b2: T::lift(1.0 - cfg.beta2),
            eps: T::lift(cfg.eps),
            wd: T::lift(cfg.weight_decay),
            step_size: T::lift(cfg.lr / bc1),
            sqrt_bc2: T::lift(bc2.sqrt()),
            decay_factor: T::lift(1.0 - cfg.lr * cfg.weight_decay),
            decoupled: cfg.decoupled,
        };
        let dw = update_block(&mut params.w, dw, &mut self.m_w, &mut self.v_w, &k);
        let dv = update_block(&mut params.v, dv, &mut self.m_v, &mut self.v_v, &k);
        Ok(Deltas { dw, dv })
    }
}

struct Coeffs<T> {
    b1: T,
    b2: T,
    one_m_b1: T,
    one_m_b2: T,
    eps: T,
    wd: T,
    step_size: T,
    sqrt_bc2: T,
    decay_factor: T,
    decoupled: bool,
}

fn check_finite<T: Scalar>(m: &Mat<T>, block: &'static str) -> Result<()> {
    if crate::linalg::all_finite(m.as_ref()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            tensor: block,
            epoch: None,
        })
    }
}

fn update_block<T: Scalar>(
    theta: &mut Mat<T>,
    grad: &Mat<T>,
    m: &mut Mat<T>,
    v: &mut Mat<T>,
    k: &Coeffs<T>,
) -> Mat<T> {
    let mut delta = Mat::<T>::zeros(theta.nrows(), theta.ncols());
    for j in 0..theta.ncols() {
        let th = theta.col_as_slice_mut(j);
        let g = grad.col_as_slice(j);
        let mj = m.col_as_slice_mut(j);
        let vj = v.col_as_slice_mut(j);
        let dj = delta.col_as_slice_mut(j);
        for i in 0..th.len() {
            let old = th[i];
            let mut x = old;
            let gi = if k.decoupled {
                x = x * k.decay_factor;
                g[i]
            } else {
                g[i] + k.wd * old
            };
            mj[i] = k.b1 * mj[i] + k.one_m_b1 * gi;
            vj[i] = k.b2 * vj[i] + k.one_m_b2 * gi * gi;
            let denom = vj[i].sqrt() / k.sqrt_bc2 + k.eps;
            x = x - k.step_size * mj[i] / denom;
            th[i] = x;
            dj[i] = x - old;
        }
    }
    delta
}
