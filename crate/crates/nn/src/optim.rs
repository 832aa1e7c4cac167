//! First-order optimizers. Each counts its own `step` calls so callers can
//! verify update cardinality.

use serde::{Deserialize, Serialize};

use crate::network::Sequential;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    lr: f64,
    velocity: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            lr: config.lr,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, net: &mut Sequential<T>) {
        let lr = T::lit(self.lr);
        let mom = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let params = net.named_params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        }
        for ((_, p), v) in params.into_iter().zip(&mut self.velocity) {
            let value = p.value.data_mut();
            for ((w, &g), vel) in value.iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                let d = g + wd * *w;
                *vel = mom * *vel + d;
                *w -= lr * *vel;
            }
        }
        self.steps += 1;
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, net: &mut Sequential<T>) {
        let params = net.named_params_mut();
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as f64;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bias1 = T::lit(1.0 - c.beta1.powf(t));
        let bias2 = T::lit(1.0 - c.beta2.powf(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (((_, p), m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let value = p.value.data_mut();
            for (((w, &g), mi), vi) in value
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
