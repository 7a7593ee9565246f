//! Parameter updates: momentum SGD, RMSprop, weight clipping and the
//! step-decay learning-rate schedule.
//!
//! Momentum convention: `v <- m * v + (g + wd * w)`, `w <- w - lr * v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decay of the RMSprop squared-gradient average.
pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

fn check_finite<T: Scalar>(params: &ParamStore<T>) -> Result<()> {
    match params.params().iter().find(|p| !p.grad.all_finite()) {
        Some(p) => Err(Error::NonFiniteGradient(p.name.clone())),
        None => Ok(()),
    }
}

fn check_values<T: Scalar>(params: &ParamStore<T>) -> Result<()> {
    match params.params().iter().find(|p| !p.value.all_finite()) {
        Some(p) => Err(Error::NonFiniteParameter(p.name.clone())),
        None => Ok(()),
    }
}

/// One momentum-SGD step over every parameter, then clears gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    check_finite(params)?;
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for p in params.params_mut() {
        let g = &mut p.grad;
        if wd != T::zero() {
            for (gi, &wi) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gi += wd * wi;
            }
        }
        if m != T::zero() {
            let v = p.velocity.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = m * *vi + gi;
            }
            for (wi, &vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                *wi -= lr * vi;
            }
        } else {
            for (wi, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                *wi -= lr * gi;
            }
        }
        g.fill(T::zero());
    }
    check_values(params)
}

/// RMSprop: `a <- rho * a + (1 - rho) g^2`, `w <- w - lr * g / sqrt(a + eps)`.
pub fn rmsprop_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_finite(params)?;
    let (lr, rho, eps) = (T::lit(lr), T::lit(RMSPROP_DECAY), T::lit(RMSPROP_EPS));
    for p in params.params_mut() {
        let a = p.sq_avg.get_or_insert_with(|| Tensor::zeros(p.grad.shape().to_vec()));
        for ((ai, wi), &gi) in a.data_mut().iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
            *ai = rho * *ai + (T::one() - rho) * gi * gi;
            *wi -= lr * gi / (*ai + eps).sqrt();
        }
        p.grad.fill(T::zero());
    }
    check_values(params)
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);

/// Adam with bias correction; the first moment lives in `velocity`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_finite(params)?;
    let (b1, b2) = ADAM_BETAS;
    for p in params.params_mut() {
        p.steps += 1;
        let t = p.steps as i32;
        let step = T::lit(lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(RMSPROP_EPS));
        let shape = p.grad.shape().to_vec();
        let m = p.velocity.get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = p.sq_avg.get_or_insert_with(|| Tensor::zeros(shape));
        for (((mi, vi), wi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(p.value.data_mut()).zip(p.grad.data()) {
            *mi = tb1 * *mi + (T::one() - tb1) * gi;
            *vi = tb2 * *vi + (T::one() - tb2) * gi * gi;
            *wi -= step * *mi / ((*vi).sqrt() + eps);
        }
        p.grad.fill(T::zero());
    }
    check_values(params)
}

/// Clamps every parameter value into `[-c, c]`.
pub fn clip_parameters<T: Scalar>(params: &mut ParamStore<T>, c: f64) {
    let c = T::lit(c);
    for p in params.params_mut() {
        for w in p.value.data_mut() {
            if *w > c {
                *w = c;
            } else if *w < -c {
                *w = -c;
            }
        }
    }
}

/// `initial * factor^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.initial;
        }
        self.initial * self.factor.powi((epoch / self.every) as i32)
    }

    pub fn scaled(&self, by: f64) -> Self {
        Self { initial: self.initial * by, ..*self }
    }
}
