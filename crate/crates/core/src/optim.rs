//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first_moment: zeros(store),
            second_moment: zeros(store),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second_moment[index]
    }

    /// Apply one update to every unfrozen parameter using the gradients held
    /// in `store`. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (i, id) in store.ids().enumerate() {
            if store.value(id).shape() != self.first_moment[i].shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?}, moments have {:?}",
                    store.name(id),
                    store.value(id).shape(),
                    self.first_moment[i].shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let cfg = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let (value, grad) = store.value_and_grad_mut(id);
            adam_update(
                value.data_mut(),
                grad.data(),
                self.first_moment[i].data_mut(),
                self.second_moment[i].data_mut(),
                t,
                &cfg,
            );
        }
        Ok(())
    }
}

/// One bias-corrected Adam update at (1-based) step `t`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
