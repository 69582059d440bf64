//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
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
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter that has a gradient in `grads`.
    ///
    /// Parameters without a gradient entry are left untouched, which is how
    /// frozen modules stay bit-identical.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient of `{name}` {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        let decay = S::lit(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (S::lit(1.0 / bc1), S::lit(1.0 / bc2));
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self.first.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidParam(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
