use serde::{Deserialize, Serialize};

use crate::numerics::{Grads, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Weight decay applies to linear weight matrices only. Biases, norm gains
/// (rank 1, also named `.weight`), mask tokens and bias tables are left
/// undecayed.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    name.ends_with(".weight") && shape.len() == 2
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore<f64>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with learning rate `lr`. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &Grads<f64>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} moments, {} grads", store.len(), self.m.len(), grads.len()),
            ));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if decays(store.name(id), store.get(id).shape()) { weight_decay } else { 0.0 };
            let g = grads.get(id);
            let p = store.get_mut(id);
            if self.m[i].shape() != p.shape() || g.is_some_and(|g| g.shape() != p.shape()) {
                return Err(Error::shape("adamw", format!("state shape mismatch for parameter {i}")));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                *w -= lr * decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` updates, then cosine decay to zero
/// at update `total`. `step` counts updates from 1.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let s = step.min(total);
    if s <= warmup {
        if warmup == 0 {
            return peak;
        }
        return peak * s as f64 / warmup as f64;
    }
    let progress = (s - warmup) as f64 / (total - warmup) as f64;
    (peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// Linear scaling of the base rate by the global batch.
pub fn scaled_lr(base_lr: f64, global_batch: usize) -> f64 {
    base_lr * global_batch as f64 / 256.0
}
