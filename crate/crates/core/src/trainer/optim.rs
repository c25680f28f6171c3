use serde::{Deserialize, Serialize};

use crate::model::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// p ← p − lr·(m̂/(√v̂ + ε) + λ·p)
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &AdamWConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let c1 = T::of(1.0 / (1.0 - cfg.beta1.powi(self.t as i32)));
        let c2 = T::of(1.0 / (1.0 - cfg.beta2.powi(self.t as i32)));
        let eps = T::of(cfg.eps);
        let lr = T::of(lr);
        let wd = T::of(cfg.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] * c1;
            let vhat = self.v[i] * c2;
            params[i] = params[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * params[i]);
        }
    }
}

/// Global L2 norm.
pub fn grad_norm<T: Real>(g: &[T]) -> f64 {
    g.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// Scales `g` so its norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(g: &mut [T], max_norm: f64) -> f64 {
    let n = grad_norm(g);
    if n > max_norm && n.is_finite() {
        let s = T::of(max_norm / n);
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}
