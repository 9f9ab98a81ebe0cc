//! SGD, Adam, and AdamW with a linear warmup/decay schedule.
//!
//! Adam folds L2 weight decay into the gradient when `weight_decay > 0`;
//! AdamW applies the same moment updates but decays weights separately
//! (decoupled). With `weight_decay == 0` the two take identical code paths,
//! so they match bit for bit.

use crate::mem::Buf;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient for parameter {index} has {got} values, expected {expected}")]
    ShapeMismatch { index: usize, got: usize, expected: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("total_steps must be positive")]
    ZeroTotalSteps,
    #[error("step {step} is beyond total_steps {total}")]
    StepOutOfRange { step: usize, total: usize },
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamw => "adamw",
        }
    }

    pub fn from_name(name: &str) -> Option<OptimizerKind> {
        match name {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "adamw" => Some(OptimizerKind::Adamw),
            _ => None,
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    params: Vec<Tensor>,
    first_moment: Vec<Buf>,
    second_moment: Vec<Buf>,
    step_count: u64,
}

impl Optimizer {
    /// Moment buffers are allocated up front for the given parameters, so
    /// [`state_bytes`](Self::state_bytes) is fixed from construction.
    pub fn new(kind: OptimizerKind, params: Vec<Tensor>, weight_decay: f64) -> Optimizer {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam | OptimizerKind::Adamw => (
                params.iter().map(|p| Buf::zeros(p.numel())).collect(),
                params.iter().map(|p| Buf::zeros(p.numel())).collect(),
            ),
        };
        Optimizer {
            kind,
            weight_decay,
            params,
            first_moment: first,
            second_moment: second,
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Bytes held by this optimizer's moment buffers.
    pub fn state_bytes(&self) -> u64 {
        let values: usize = self
            .first_moment
            .iter()
            .chain(self.second_moment.iter())
            .map(|b| b.len())
            .sum();
        (values * std::mem::size_of::<f64>()) as u64
    }

    /// Applies one update from the gradients currently accumulated on the
    /// parameters. Parameters without a gradient are skipped.
    pub fn step(&mut self, lr: f64) -> Result<(), OptimError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(OptimError::BadLearningRate(lr));
        }
        self.step_count += 1;
        let lambda = self.weight_decay;
        for (i, param) in self.params.iter().enumerate() {
            let Some(grad) = param.grad() else {
                continue;
            };
            if grad.len() != param.numel() {
                return Err(OptimError::ShapeMismatch {
                    index: i,
                    got: grad.len(),
                    expected: param.numel(),
                });
            }
            let mut theta = param.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (t, &g) in theta.iter_mut().zip(&grad) {
                        *t -= lr * g;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let fold_l2 = self.kind == OptimizerKind::Adam && lambda > 0.0;
                    let decoupled = self.kind == OptimizerKind::Adamw && lambda > 0.0;
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
                    for (j, (t, &g_raw)) in theta.iter_mut().zip(&grad).enumerate() {
                        let g = if fold_l2 { g_raw + lambda * *t } else { g_raw };
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        let mut update = m_hat / (v_hat.sqrt() + ADAM_EPS);
                        if decoupled {
                            update += lambda * *t;
                        }
                        *t -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `eta` over the first `ceil(warmup_ratio * total)`
/// steps, then linear decay from `eta` to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, eta: f64) -> Result<f64, OptimError> {
    if total_steps == 0 {
        return Err(OptimError::ZeroTotalSteps);
    }
    if step > total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(eta * step as f64 / warmup as f64);
    }
    let remaining = total_steps - warmup;
    if remaining == 0 {
        return Ok(0.0);
    }
    Ok(eta * (1.0 - (step - warmup) as f64 / remaining as f64))
}
