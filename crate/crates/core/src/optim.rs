//! Adam and the step-decay learning-rate schedule.

use alloc::vec::Vec;

use crate::autograd::{Gradients, ParamKind, ParamStore};
use crate::error::{contract, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter that received
    /// a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(contract!("learning rate must be positive, got {lr}"));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - math::exp(t * math::ln(beta1));
        let c2 = 1.0 - math::exp(t * math::ln(beta2));
        for (id, g) in grads.params() {
            if store.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for ((mi, vi), &gi) in md.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (md, vd) = (m.data(), v.data());
            store.update(id, |w| {
                for ((wi, &mi), &vi) in w.iter_mut().zip(md).zip(vd) {
                    *wi -= lr * (mi / c1) / (math::sqrt(vi / c2) + eps);
                }
            });
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: `base * factor^floor((epoch - 1) / interval)`.
pub fn step_decay(base: f64, factor: f64, interval: usize, epoch: usize) -> f64 {
    let k = (epoch.max(1) - 1) / interval.max(1);
    let mut lr = base;
    for _ in 0..k {
        lr *= factor;
    }
    lr
}
