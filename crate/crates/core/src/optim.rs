//! Adam with global gradient-norm clipping and a warmup/cosine schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub final_lr_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 100,
            final_lr_fraction: 0.1,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, total_steps: usize) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(c.warmup_steps).max(1);
        let progress = ((step - c.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        c.lr * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * cos)
    }

    /// Clips, applies one update from the accumulated gradients and returns
    /// the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let norm = store.grad_norm();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            store.scale_grads(self.cfg.clip_norm / norm);
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data.clone();
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let w = &mut store.value_mut(id).data;
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
            }
        }
        norm
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}
