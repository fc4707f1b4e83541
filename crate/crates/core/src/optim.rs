//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{validation_err, Result};
use crate::params::Params;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(validation_err!("learning rate must be positive, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(validation_err!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(validation_err!("eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// Moment estimates per parameter index; parameters that never receive a
/// gradient keep no state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self { cfg, step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    /// One update with `grads[i]` for parameter `i` (`None` = untouched).
    pub fn update(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - libm::pow(c.beta1, self.step as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, self.step as f64));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.value_mut(i).data_mut();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); p.len()]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + eps) + wd * p[j]);
            }
        }
    }
}
