//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 3e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every learnable tensor with gradients `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2, wd) = (T::of(c.beta1), T::of(c.beta2), T::of(c.weight_decay));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !entry.learnable {
                continue;
            }
            let theta = entry.value.data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let gj = g[j] + wd * theta[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                theta[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::vector(vec![1.0, -2.0]), true);
        store.add("buf", Tensor::vector(vec![5.0]), false);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let grads = vec![Tensor::vector(vec![0.5, -3.0]), Tensor::vector(vec![1.0])];
        adam.step(&mut store, &grads, 0.1);
        let a = store.entries()[0].value.data();
        assert!((a[0] - 0.9).abs() < 1e-6 && (a[1] + 1.9).abs() < 1e-6);
        assert_eq!(store.entries()[1].value.data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::vector(vec![3.0, -4.0]), true);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let g = store.entries()[0].value.map(|v| 2.0 * (v - 1.0));
            adam.step(&mut store, &[g], 0.01);
        }
        for &v in store.entries()[0].value.data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }
}
