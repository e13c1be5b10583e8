//! Adam over a fixed list of parameter slots.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.cfg.learning_rate = lr;
    }

    /// Advances the shared step counter; call once before the slot updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        self.update_scaled(slot, param, grad, 1.0);
    }

    /// Update with the gradient multiplied by `gscale` (used for clipping).
    pub fn update_scaled(&mut self, slot: usize, param: &mut [f32], grad: &[f32], gscale: f32) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.t.max(1);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(param.len(), m.len(), "adam slot {slot} size");
        for i in 0..param.len() {
            let g = grad[i] * gscale;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= learning_rate * mh / (vh.sqrt() + eps);
        }
    }
}
