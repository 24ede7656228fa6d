//! Learning-rate schedule and Adam with decoupled weight decay.

use crate::kernel::Tensor;
use crate::params::ParamStore;

use super::{TrainConfig, TrainError};

/// Linear warmup from 0 to `cfg.lr` over `warmup_iters`, then linear decay
/// to 0 at `total_iters`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_iters, cfg.total_iters);
    if iter < w {
        cfg.lr * iter as f64 / w as f64
    } else if iter >= t {
        if t == w && iter == w {
            cfg.lr
        } else {
            0.0
        }
    } else {
        cfg.lr * (t - iter) as f64 / (t - w) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates per parameter in store order. Parameters that receive
/// no gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: Vec<(Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .collect();
        Self { cfg, step: 0, moments }
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to parameter
    /// `i` of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<(), TrainError> {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite("gradient"));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(k).and_then(Option::as_ref) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let (m, v) = &mut self.moments[k];
            let pv = p.value.data_mut();
            for (((x, &gi), mi), vi) in pv.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *x -= lr * decay * *x;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
