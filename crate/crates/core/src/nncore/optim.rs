//! SGD with momentum and Adam, both with coupled (L2) weight decay.
//!
//! Optimizer state is explicit and indexed by parameter slot, so the caller
//! decides which tensors an optimizer owns.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_sgd_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_sgd_decay() -> f64 {
    1e-4
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "sgd lr must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), Config, "sgd momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0, Config, "sgd weight decay must be non-negative");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_adam_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_adam_decay")]
    pub weight_decay: f64,
}

fn default_adam_lr() -> f64 {
    0.01
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_adam_decay() -> f64 {
    5e-5
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_adam_lr(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_adam_decay(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "adam lr must be positive");
        ensure!(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            Config,
            "adam betas must be in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "adam eps must be positive");
        ensure!(self.weight_decay >= 0.0, Config, "adam weight decay must be non-negative");
        Ok(())
    }
}

fn check_shapes<S: Scalar>(param: &[S], grad: &[S]) -> Result<()> {
    ensure!(
        param.len() == grad.len(),
        Dimension,
        "parameter of {} values, gradient of {}",
        param.len(),
        grad.len()
    );
    Ok(())
}

/// `buf = momentum * buf + (g + wd * p); p -= lr * buf`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates parameter `slot`; `lr_scale` multiplies the learning rate.
    pub fn step_slot(&mut self, slot: usize, param: &mut [S], grad: &[S], lr_scale: S) -> Result<()> {
        check_shapes(param, grad)?;
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let lr = S::of(self.config.lr) * lr_scale;
        let wd = S::of(self.config.weight_decay);
        let mu = S::of(self.config.momentum);
        let first = self.velocity[slot].is_none();
        let buf = self.velocity[slot].get_or_insert_with(|| vec![S::zero(); param.len()]);
        for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let d = g + wd * *p;
            *b = if first { d } else { mu * *b + d };
            *p = *p - lr * *b;
        }
        Ok(())
    }

    /// Updates every slot with a gradient; slots without one are left alone.
    pub fn step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Option<Tensor<S>>],
        lr_scale: &[S],
    ) -> Result<()> {
        ensure!(
            params.len() == grads.len() && params.len() == lr_scale.len(),
            Dimension,
            "{} params, {} grads, {} lr scales",
            params.len(),
            grads.len(),
            lr_scale.len()
        );
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if let Some(g) = g {
                self.step_slot(slot, p.data_mut(), g.data(), lr_scale[slot])?;
            }
        }
        Ok(())
    }

    /// Drops all momentum buffers.
    pub fn reset_momentum(&mut self) {
        self.velocity.clear();
    }
}

#[derive(Debug, Clone)]
struct AdamSlot<S> {
    m: Vec<S>,
    v: Vec<S>,
    steps: i32,
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    slots: Vec<Option<AdamSlot<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: Vec::new(),
        }
    }

    pub fn step_slot(&mut self, slot: usize, param: &mut [S], grad: &[S]) -> Result<()> {
        check_shapes(param, grad)?;
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let c = self.config;
        let (b1, b2) = (S::of(c.betas.0), S::of(c.betas.1));
        let (lr, eps, wd) = (S::of(c.lr), S::of(c.eps), S::of(c.weight_decay));
        let state = self.slots[slot].get_or_insert_with(|| AdamSlot {
            m: vec![S::zero(); param.len()],
            v: vec![S::zero(); param.len()],
            steps: 0,
        });
        state.steps += 1;
        let bc1 = S::one() - b1.powi(state.steps);
        let bc2 = S::one() - b2.powi(state.steps);
        for (i, p) in param.iter_mut().enumerate() {
            let g = grad[i] + wd * *p;
            state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
            state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
