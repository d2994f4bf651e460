//! First-order optimizers over flat parameter buffers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::milnet::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum.
    Sgd,
    Adam,
}

/// Adam moments for one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Advances the step counter. Call once per update, before [`Adam::apply`].
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `params[offset..]` in place from `grads`.
    pub fn apply(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.tick();
        self.apply(0, params, grads);
    }
}

/// Optimizer over every tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64, velocity: Vec<Vec<f64>> },
    Adam { state: Adam, offsets: Vec<usize> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr,
                momentum,
                velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            },
            OptimizerKind::Adam => {
                let mut offsets = Vec::with_capacity(params.len());
                let mut total = 0;
                for t in params.tensors() {
                    offsets.push(total);
                    total += t.len();
                }
                Optimizer::Adam { state: Adam::new(total, lr), offsets }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                // v ← μv + g;  p ← p − lr (g + μv)
                for ((p, g), vel) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(velocity.iter_mut()) {
                    for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *vi = *momentum * *vi + gi;
                        *pi -= *lr * (gi + *momentum * *vi);
                    }
                }
            }
            Optimizer::Adam { state, offsets } => {
                state.tick();
                for ((p, g), &off) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(offsets.iter()) {
                    state.apply(off, p.data_mut(), g.data());
                }
            }
        }
    }
}
