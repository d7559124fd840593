use std::collections::HashMap;

use crate::graph::Tensor;
use crate::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0, clip_norm: None, step: 0, moments: HashMap::new() }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> f64 {
        self.step += 1;
        let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.raw_dim()), Tensor::zeros(param.raw_dim())));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut *param).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
        norm
    }
}
