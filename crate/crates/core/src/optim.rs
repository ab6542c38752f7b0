//! SGD with momentum for the weights, Adam for the architecture logits and
//! the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Upper bound enforced on every `beta` after each update.
pub const BETA_BOUND: Float = 1.0;

fn check_shapes(params: &[Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} optimizer buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state[k].shape() {
            return Err(Error::contract(format!(
                "parameter {k} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// `v <- m v + (g + wd theta)`, `theta <- theta - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: Float,
    pub weight_decay: Float,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Tensor], momentum: Float, weight_decay: Float) -> Self {
        Sgd { momentum, weight_decay, velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: Float) -> Result<()> {
        check_shapes(params, grads, &self.velocity)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = self.momentum * *v + (g + self.weight_decay * *p);
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: Float,
    pub betas: (Float, Float),
    pub weight_decay: Float,
    pub eps: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, betas: (0.5, 0.999), weight_decay: 1e-3, eps: 1e-8 }
    }
}

/// Bias-corrected Adam; weight decay enters as `g + wd * p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u32,
}

impl Adam {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { config, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads, &self.m)?;
        let AdamConfig { lr, betas: (b1, b2), weight_decay, eps } = self.config;
        self.steps += 1;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = g + weight_decay * *p;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0 (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: Float) -> Result<Float> {
    if epoch >= total_epochs {
        return Err(Error::contract(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    let phase = PI * epoch as f64 / total_epochs as f64;
    Ok(lr0 * ((1.0 + phase.cos()) / 2.0) as Float)
}

/// Clamps every `beta` to at most [`BETA_BOUND`].
pub fn project_beta(beta: &mut [Tensor]) {
    for t in beta {
        for b in t.data_mut() {
            *b = b.min(BETA_BOUND);
        }
    }
}
