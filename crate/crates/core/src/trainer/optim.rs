use reskan_tensor::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("train.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("train.eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
/// Moments are stored per parameter in store order.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamW { config, step: 0, m: zeros(()), v: zeros(()) }
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Training(format!(
                "optimizer tracks {} parameters but the model has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient in parameter {}", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let p0 = w.as_f64();
                let update = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *w = T::from_f64(p0 - c.lr * (update + c.weight_decay * p0));
            }
        }
        Ok(())
    }
}
