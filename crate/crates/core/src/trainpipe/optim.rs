use serde::{Deserialize, Serialize};

use crate::numcore::Array;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one parameter plus its update count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array<f32>,
    pub v: Array<f32>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Array::zeros(shape),
            v: Array::zeros(shape),
            t: 0,
        }
    }
}

impl AdamW {
    /// One update of `theta` in place. Vectors (norm gains, biases) are not
    /// decayed.
    pub fn update(&self, theta: &mut Array<f32>, grad: &Array<f32>, mom: &mut Moments, lr: f64) {
        mom.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(mom.t as i32);
        let c2 = 1.0 - b2.powi(mom.t as i32);
        let decay = if theta.shape().len() >= 2 { self.weight_decay } else { 0.0 };
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let ms = mom.m.data_mut();
        let vs = mom.v.data_mut();
        for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(ms).zip(vs) {
            *m = b1f * *m + (1.0 - b1f) * g;
            *v = b2f * *v + (1.0 - b2f) * g * g;
            let mhat = *m as f64 / c1;
            let vhat = *v as f64 / c2;
            let step = mhat / (vhat.sqrt() + self.eps) + decay * *p as f64;
            *p = (*p as f64 - lr * step) as f32;
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Array<f32>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
