use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::tensor::Real;

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum();
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries().iter().map(|e| alloc::vec![0.0; e.value.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, m: zeros.clone(), v: zeros },
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = self.lr / bc1;
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for (j, p) in e.value.data.iter_mut().enumerate() {
                let g = grads[i][j].as_f64() as f32;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let denom = num_traits::Float::sqrt(v[j] as f64 / bc2) + self.eps;
                *p -= T::from_f64(step_size * m[j] as f64 / denom);
            }
        }
    }
}
