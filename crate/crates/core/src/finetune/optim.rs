use serde::{Deserialize, Serialize};

use crate::model::{Group, Parameters, VisionModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay over a fixed subset of tensors.
///
/// Moment buffers exist only for the tensors selected at construction, so a
/// new optimizer is built whenever the trainable set changes.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    lr: f64,
    step: u64,
    /// Indices into `Parameters::tensors()` with their moment buffers.
    slots: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    /// Tracks every tensor whose group passes `select`.
    pub fn new(model: &VisionModel, lr: f64, cfg: AdamWConfig, select: impl Fn(Group) -> bool) -> Self {
        let slots = model
            .params
            .tensors()
            .iter()
            .enumerate()
            .filter(|(_, t)| select(t.group))
            .map(|(i, t)| (i, vec![0.0; t.data.len()], vec![0.0; t.data.len()]))
            .collect();
        Self {
            cfg,
            lr,
            step: 0,
            slots,
        }
    }

    pub fn tracked_tensors(&self) -> usize {
        self.slots.len()
    }

    /// One update from accumulated gradients.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grads.tensors();
        let mut tensors = params.tensors_mut();
        for (idx, m, v) in &mut self.slots {
            let t = &mut tensors[*idx];
            let g = grads[*idx].data;
            let decay = if t.decay { weight_decay } else { 0.0 };
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                t.data[j] -= self.lr * (mhat / (vhat.sqrt() + eps) + decay * t.data[j]);
            }
        }
    }
}
