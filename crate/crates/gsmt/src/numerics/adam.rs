use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Adam hyperparameters. Defaults are the conventional ones; every field is
/// overridable from the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<(), NumericsError> {
        if !(self.lr > 0.0) {
            return Err(NumericsError::Optimizer(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NumericsError::Optimizer(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(NumericsError::Optimizer(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second-moment buffers plus the shared step counter.
///
/// Buffers are allocated on the first step and stay shape-congruent with
/// their parameter from then on. The update is the standard bias-corrected
/// rule and is fully deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    config: AdamConfig,
    t: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self, NumericsError> {
        config.validate()?;
        Ok(AdamState {
            config,
            t: 0,
            slots: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one Adam step to every parameter in order. `grads[i]` is the
    /// gradient for `params[i]`; a `None` gradient means zero (the parameter
    /// was unreachable this step) and leaves the value unchanged while the
    /// moments decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f64]>],
    ) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::Optimizer(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        } else if self.slots.len() != params.len() {
            return Err(NumericsError::Optimizer(format!(
                "state has {} slots, got {} params",
                self.slots.len(),
                params.len()
            )));
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);

        for ((param, slot), grad) in params.iter_mut().zip(&mut self.slots).zip(grads) {
            if slot.m.len() != param.numel() {
                return Err(NumericsError::Optimizer(format!(
                    "slot has {} elements, param has {}",
                    slot.m.len(),
                    param.numel()
                )));
            }
            if let Some(g) = grad {
                if g.len() != param.numel() {
                    return Err(NumericsError::Optimizer(format!(
                        "grad has {} elements, param has {}",
                        g.len(),
                        param.numel()
                    )));
                }
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
