use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter, followed by
/// clearing the gradients. Frozen parameters are never touched.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    store.step += 1;
    let t = store.step as i32;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::of_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::of_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::of_f64(cfg.lr);
    let eps = T::of_f64(cfg.eps);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let g = p.grad.take().expect("checked above");
        let values = p.value.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            p.m[i] = b1 * p.m[i] + (one - b1) * gi;
            p.v[i] = b2 * p.v[i] + (one - b2) * gi * gi;
            let m_hat = p.m[i] / c1;
            let v_hat = p.v[i] / c2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.zero_grads();
    Ok(())
}
