use std::f64::consts::PI;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at epoch `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let e = epoch.min(total) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * e / total as f64).cos())
}

/// SGD with classical momentum: `v <- mu v - lr g; w <- w + v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub lr: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(store: &ParamStore<F>, momentum: f64, lr: f64) -> Self {
        Self {
            momentum,
            lr,
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>) {
        let (mu, lr) = (F::lit(self.momentum), F::lit(self.lr));
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, vel), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.grad.data())
            {
                *vel = mu * *vel - lr * g;
                *w += *vel;
            }
        }
    }

    pub fn velocity(&self) -> &[Tensor<F>] {
        &self.velocity
    }
}
