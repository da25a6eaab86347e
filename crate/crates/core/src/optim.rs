use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: None, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` is indexed like the store's entries.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dim(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
            self.v = self.m.clone();
        }
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let norm = grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient norm at step {}", self.step)));
            }
            if norm > c {
                scale = c / norm;
            }
        }
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let ids = store.trainable_ids();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let mut w = store.get(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..w.len() {
                let gk = g.data()[k] * scale + self.weight_decay * w[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / b1c;
                let vh = v[k] / b2c;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::new(&shape, w)?)?;
        }
        Ok(())
    }
}
