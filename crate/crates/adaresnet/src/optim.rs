//! Parameter updates: plain gradient descent and Adam.
//!
//! Both operate on [`Parameter`] slices in place, reading the gradients a
//! backward pass deposited. Non-trainable parameters are never touched and
//! never acquire optimizer state.

use std::collections::BTreeMap;

use crate::autograd::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `w <- w - lr * g`, elementwise, for every trainable parameter.
pub fn sgd_step(params: &mut [Parameter], lr: f32) -> Result<()> {
    for p in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        check_grad(p)?;
        for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
    }
    Ok(())
}

fn check_grad(p: &Parameter) -> Result<()> {
    if p.grad.shape() != p.value.shape() {
        return Err(Error::MissingGradient {
            name: p.name.clone(),
        });
    }
    if !p.grad.is_finite() {
        return Err(Error::NonFinite {
            context: format!("gradient of '{}'", p.name),
        });
    }
    Ok(())
}

/// Adam hyperparameters. The defaults are the canonical ones.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam with standard bias correction. State is keyed by parameter name
/// and allocated on first sight of each trainable parameter.
///
/// The running powers of beta used for bias correction are kept as state
/// and updated by one multiplication per step. `1 - beta2^t` sits next to
/// catastrophic cancellation for small `t`, so the exact floating-point
/// evaluation order of the power matters; an explicit product gives the
/// same bits on every platform and matches the scalar reference.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    beta1_power: f32,
    beta2_power: f32,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            beta1_power: 1.0,
            beta2_power: 1.0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Names with allocated moment state (for tests).
    pub fn tracked(&self) -> Vec<&str> {
        self.moments.keys().map(String::as_str).collect()
    }

    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        self.step += 1;
        let c = self.config;
        self.beta1_power *= c.beta1;
        self.beta2_power *= c.beta2;
        let bias1 = 1.0 - self.beta1_power;
        let bias2 = 1.0 - self.beta2_power;
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            check_grad(p)?;
            let entry = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(entry.m.data_mut().iter_mut())
                .zip(entry.v.data_mut().iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
