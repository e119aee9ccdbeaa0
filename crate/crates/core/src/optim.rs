//! AdamW with decoupled weight decay.
//!
//! Moment accumulators exist for exactly the trainable tensors of the
//! current stage; stage transitions rebuild the optimizer from scratch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

pub struct AdamW<T> {
    cfg: AdamConfig,
    /// first/second moments per trainable tensor
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
    step: usize,
}

impl<T: Real> AdamW<T> {
    /// Build state for the store's current trainable set.
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let mut moments = HashMap::new();
        for id in store.trainable_ids() {
            let n = store.data(id).len();
            moments.insert(id, (vec![T::ZERO; n], vec![T::ZERO; n]));
        }
        AdamW {
            cfg,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay Adam update over the trainable set.
    /// Frozen tensors are untouched by construction: only tensors with
    /// moment state are visited.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.cfg.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        let mut ids: Vec<ParamId> = self.moments.keys().copied().collect();
        ids.sort_by_key(|id| id.0);
        for id in ids {
            let entry = store.entry(id);
            if !entry.trainable {
                return Err(Error::Contract(format!(
                    "optimizer state covers `{}` but it is no longer trainable",
                    entry.decl.path
                )));
            }
            if !entry.grad_live {
                return Err(Error::Contract(format!(
                    "missing gradient for trainable parameter `{}`",
                    entry.decl.path
                )));
            }
            let (m, v) = self.moments.get_mut(&id).expect("moment state");
            let grad = store.grad(id).to_vec();
            let data = store.data_mut(id);
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                // decay applied to the pre-update parameter
                let p = data[i];
                data[i] = p - decay * p - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
