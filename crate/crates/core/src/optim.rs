//! AdamW with decoupled weight decay and an epoch-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, Mat, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Halve the learning rate every this many epochs; 0 keeps it constant.
    pub halve_every: u32,
    /// Clip the global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, halve_every: 1, grad_clip: 1.0 }
    }
}

impl OptimConfig {
    pub fn lr_at_epoch(&self, epoch: u32) -> f64 {
        if self.halve_every == 0 {
            self.lr
        } else {
            self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let c = &self.config;
        let mut scale = 1.0;
        if c.grad_clip > 0.0 {
            let n = grads.global_norm();
            if n > c.grad_clip {
                scale = c.grad_clip / n;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(&grads.grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_schedule() {
        let c = OptimConfig { lr: 1.0, halve_every: 1, ..Default::default() };
        assert_eq!(c.lr_at_epoch(0), 1.0);
        assert_eq!(c.lr_at_epoch(3), 0.125);
        let c = OptimConfig { lr: 1.0, halve_every: 2, ..Default::default() };
        assert_eq!(c.lr_at_epoch(3), 0.5);
        let c = OptimConfig { lr: 1.0, halve_every: 0, ..Default::default() };
        assert_eq!(c.lr_at_epoch(9), 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(OptimConfig { lr: 0.1, weight_decay: 0.0, grad_clip: 0.0, ..Default::default() }, &p);
        for _ in 0..500 {
            let mut g = p.zero_grads();
            g.grads[0] = p.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut p, &g, 0.1);
        }
        assert!(p.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamStore::new();
        p.add("x", Mat::from_elem((2, 2), 0.7));
        let before = p.clone();
        let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..Default::default() }, &p);
        let g = p.zero_grads();
        opt.step(&mut p, &g, 1e-3);
        assert_eq!(p, before);
    }
}
