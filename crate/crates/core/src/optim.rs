//! Parameter updates: Adam and plain SGD, both behind a global-norm clip.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum())
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: Option<f64>) -> Self {
        Self {
            kind,
            lr,
            clip,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "optimizer step" });
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in store.tensors_mut().iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * scale * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as f64;
                let c1 = 1.0 - math::powf(self.beta1, t);
                let c2 = 1.0 - math::powf(self.beta2, t);
                for (((p, g), m), v) in store
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let (w, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let d = g.data()[i] * scale;
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                        w[i] -= self.lr * (m[i] / c1) / (math::sqrt(v[i] / c2) + self.eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], alloc::vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Optimizer::new(kind, lr, Some(1.0));
        for _ in 0..500 {
            let g = store.tensors()[0].clone();
            opt.step(&mut store, &[g]).unwrap();
        }
        store.tensors()[0].data().iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn both_descend_a_bowl() {
        assert!(quadratic(OptimizerKind::Sgd, 0.1) < 1e-3);
        assert!(quadratic(OptimizerKind::Adam, 0.05) < 0.05);
    }

    #[test]
    fn clip_caps_sgd_step() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, Some(1.0));
        let n = opt.step(&mut store, &[Tensor::new(&[1], alloc::vec![100.0]).unwrap()]).unwrap();
        assert_eq!(n, 100.0);
        assert_eq!(store.tensors()[0].data()[0], -1.0);
    }
}
