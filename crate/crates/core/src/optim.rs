//! Bias-corrected Adam.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {}", b)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", format!("must be > 0, got {}", self.eps)));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("max_grad_norm", format!("must be > 0, got {}", c)));
            }
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.shape().to_vec());
        Self {
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn conforms_to(&self, params: &ParamStore<S>) -> bool {
        let same = |ts: &[Tensor<S>]| {
            ts.len() == params.len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        same(&self.m) && same(&self.v)
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    libm::sqrt(
        grads
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>(),
    )
}

/// One Adam update in place; returns the pre-clip gradient norm.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    grads: &[Tensor<S>],
    cfg: &AdamConfig,
) -> Result<f64> {
    if grads.len() != params.len() || !state.conforms_to(params) {
        return Err(Error::MissingGrad(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", i)));
        }
    }
    let norm = grad_norm(grads);
    let clip = match cfg.max_grad_norm {
        Some(c) if norm > c => S::from_f64(c / norm),
        _ => S::one(),
    };
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let c1 = S::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
    let c2 = S::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);
    for (k, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(norm)
}
