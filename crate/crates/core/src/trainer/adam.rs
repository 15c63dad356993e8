use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
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
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every tensor of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.params().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update of `ids`; a missing gradient is an error, not a skip.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &Gradients) -> Result<()> {
        for &id in ids {
            if grads.get(id).is_none() {
                return Err(Error::MissingGrad(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for &id in ids {
            let g = grads.get(id).expect("checked above");
            let slot = id.0;
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam", g.shape(), &[p.len()]));
            }
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
