use std::collections::BTreeMap;

use super::graph::Grads;
use super::nn::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Global gradient-norm clip applied by default.
pub const DEFAULT_CLIP: f64 = 0.8;

/// AdamW with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(DEFAULT_CLIP),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from `grads` to every trainable parameter that
    /// received a gradient. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<f64> {
        let entries: Vec<(String, Tensor)> = grads
            .param_grads()
            .into_iter()
            .filter(|(n, _)| store.is_trainable(n))
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect();
        let norm = entries.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in entries {
            let param = store.get_mut(&name)?;
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            let p = param.data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i] * clip;
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(norm)
    }
}
