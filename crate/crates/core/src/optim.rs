//! AdamW and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled weight decay Adam over the trainable parameters of a store.
/// Decay applies to matrices and kernels only, not to vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    vec![0.0; p.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let i = id.index();
            let g = grads.get(id);
            let decay = store.value(id).rank() >= 2 && c.weight_decay > 0.0;
            let w = store.value_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                let gj = g[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut wj = w[j] as f64;
                if decay {
                    wj -= lr * c.weight_decay * wj;
                }
                wj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                w[j] = wj as f32;
            }
        }
    }
}

/// Linear warmup from 0 to `peak`, then `peak · ½(1 + cos(π t̂))` with t̂
/// running from 0 at the end of warmup to 1 at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).round() as usize;
        Schedule {
            peak,
            warmup_steps: warmup_steps.min(total_steps.saturating_sub(1)),
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1 + self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
