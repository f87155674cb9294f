use alloc::vec::Vec;

use crate::model::PolicyParams;

/// Global L2 norm of `grads`; scales them down to `max_norm` when larger.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// Plain gradient ascent with global norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub max_grad_norm: f64,
}

impl Sgd {
    /// `theta += lr * clip(grad)`; returns the unclipped gradient norm.
    pub fn ascend(&self, params: &mut PolicyParams, mut grads: Vec<Vec<f64>>) -> f64 {
        let norm = clip_grad_norm(&mut grads, self.max_grad_norm);
        for (t, g) in params.tensors_mut().iter_mut().zip(&grads) {
            for (p, d) in t.data_mut().iter_mut().zip(g) {
                *p += self.learning_rate * d;
            }
        }
        norm
    }
}

/// Adam, used for the supervised warm-up only.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One descent step on `grads` (gradients of a loss to minimize).
    /// Returns the unclipped gradient norm.
    pub fn descend(&mut self, params: &mut PolicyParams, mut grads: Vec<Vec<f64>>) -> f64 {
        let norm = clip_grad_norm(&mut grads, self.max_grad_norm);
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| alloc::vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (slot, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[slot], &mut self.v[slot], &grads[slot]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= self.learning_rate * (m[i] / b1t) / (libm::sqrt(v[i] / b2t) + self.eps);
            }
        }
        norm
    }
}
