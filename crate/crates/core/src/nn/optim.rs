use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one [`ParamStore`]. Moment buffers grow with the store, so
/// parameters created after the optimizer still get updated.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    config: AdamConfig,
    step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to gradients multiplied by
    /// `grad_scale`. Frozen entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64, grad_scale: f64) {
        self.step += 1;
        let entries = store.entries_mut();
        while self.m.len() < entries.len() {
            let shape = entries[self.m.len()].value.raw_dim();
            self.m.push(Array2::zeros(shape));
            self.v.push(Array2::zeros(shape));
        }
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let cast = |x: f64| F::from(x).unwrap();
        let (b1, b2, eps, scale) = (cast(c.beta1), cast(c.beta2), cast(c.eps), cast(grad_scale));
        let step_size = cast(lr / bc1);
        let bc2_sqrt = cast(bc2.sqrt());
        for ((e, m), v) in entries.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !e.trainable {
                continue;
            }
            Zip::from(&mut e.value)
                .and(&e.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g * scale;
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
        }
    }
}

/// Scale factor that brings the joint gradient norm of `stores` down to
/// `max_norm`, together with the unclipped norm.
pub fn clip_global_norm<F: Real>(stores: &[&ParamStore<F>], max_norm: f64) -> (f64, f64) {
    let norm = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    let scale = if norm > max_norm && norm > 0.0 { max_norm / norm } else { 1.0 };
    (scale, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.get_or_create("w", (1, 2), Init::Constant(1.0)).unwrap();
        store.accumulate_grad(id, &ndarray::array![[3.0, -0.5]]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, 0.1, 1.0);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.get_or_create("w", (1, 1), Init::Constant(5.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            store.zero_grads();
            let w = store.value(id)[[0, 0]];
            store.accumulate_grad(id, &ndarray::array![[2.0 * (w - 2.0)]]);
            adam.step(&mut store, 0.05, 1.0);
        }
        assert!((store.value(id)[[0, 0]] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_scale() {
        let mut a = ParamStore::<f64>::new(0);
        let mut b = ParamStore::<f64>::new(0);
        let ia = a.get_or_create("x", (1, 1), Init::Zeros).unwrap();
        let ib = b.get_or_create("y", (1, 1), Init::Zeros).unwrap();
        a.accumulate_grad(ia, &ndarray::array![[3.0]]);
        b.accumulate_grad(ib, &ndarray::array![[4.0]]);
        let (scale, norm) = clip_global_norm(&[&a, &b], 1.0);
        assert!((norm - 5.0).abs() < 1e-12 && (scale - 0.2).abs() < 1e-12);
        assert_eq!(clip_global_norm(&[&a, &b], 10.0).0, 1.0);
    }
}
