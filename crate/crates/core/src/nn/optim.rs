use serde::{Deserialize, Serialize};

use super::model::{Model, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine {
        lr_start: f64,
        lr_end: f64,
        total_epochs: usize,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    /// Cosine 1e-3 -> 1e-5, the pretraining/extraction default.
    pub fn default_cosine(total_epochs: usize) -> Self {
        LrSchedule::Cosine {
            lr_start: 1e-3,
            lr_end: 1e-5,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Cosine {
                lr_start,
                lr_end,
                total_epochs,
            } => {
                if !(lr_start >= lr_end && lr_end > 0.0) || total_epochs == 0 {
                    return Err(Error::invalid(format!(
                        "cosine schedule needs lr_start >= lr_end > 0 and epochs >= 1 \
                         (got {lr_start}, {lr_end}, {total_epochs})"
                    )));
                }
            }
            LrSchedule::Constant { lr } => {
                if !(lr >= 0.0) || !lr.is_finite() {
                    return Err(Error::invalid(format!("invalid learning rate {lr}")));
                }
            }
        }
        Ok(())
    }

    /// Learning rate at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Cosine {
                lr_start,
                lr_end,
                total_epochs,
            } => {
                let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
                lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments plus the hyper-parameters applied at the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr,
            weight_decay,
            config: AdamConfig::default(),
        }
    }

    pub fn for_model(model: &Model, lr: f64, weight_decay: f64) -> Self {
        Self::new(model.num_params(), lr, weight_decay)
    }
}

/// One Adam step with decoupled weight decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
///
/// With a `trainable` mask, masked-out parameters and their moments are left
/// untouched.
pub fn adam_step(
    model: &mut Model,
    grads: &ParamVector,
    state: &mut OptimizerState,
    trainable: Option<&[bool]>,
) -> Result<()> {
    let n = model.num_params();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            expected: vec![n],
            actual: vec![grads.len(), state.m.len(), state.v.len()],
        });
    }
    if let Some(mask) = trainable {
        if mask.len() != n {
            return Err(Error::Shape {
                expected: vec![n],
                actual: vec![mask.len()],
            });
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = (1.0 - state.lr * state.weight_decay) as f32;
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let step = (state.lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = eps as f32;
    let params = model.params_mut();
    for i in 0..n {
        if let Some(mask) = trainable {
            if !mask[i] {
                continue;
            }
        }
        let g = grads.0[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut p = params[i];
        if state.weight_decay != 0.0 {
            p *= decay;
        }
        p -= step * m / (v.sqrt() / bc2_sqrt + eps);
        if !p.is_finite() {
            return Err(Error::Diverged {
                phase: "optimizer step".into(),
                epoch: 0,
                step: state.t as usize,
                loss: f64::NAN,
            });
        }
        params[i] = p;
    }
    Ok(())
}
