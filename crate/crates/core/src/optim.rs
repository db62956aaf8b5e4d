//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Rmsprop,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(Self::SgdMomentum),
            "rmsprop" => Ok(Self::Rmsprop),
            "adam" => Ok(Self::Adam),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

pub const MOMENTUM: f64 = 0.9;
pub const RMS_DECAY: f64 = 0.99;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Optimizer state: first and second moment buffers and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let v = match kind {
            OptimizerKind::SgdMomentum => Vec::new(),
            _ => vec![0.0; len],
        };
        let m = match kind {
            OptimizerKind::Rmsprop => Vec::new(),
            _ => vec![0.0; len],
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let len = self.m.len().max(self.v.len());
        if params.len() != len || grads.len() != len {
            return Err(Error::DimensionMismatch {
                context: "optimizer state",
                expected: len,
                actual: params.len().min(grads.len()),
            });
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = MOMENTUM * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.v.iter_mut()) {
                    *v = RMS_DECAY * *v + (1.0 - RMS_DECAY) * g * g;
                    *p -= lr * g / (v.sqrt() + EPS);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
        Ok(())
    }
}

/// Learning rate in epoch `epoch` (1-based): divided by 10 from epoch
/// `ceil(0.75 * epochs)` on when `decay` is set.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize, decay: bool) -> f64 {
    let drop_at = (3 * epochs).div_ceil(4);
    if decay && epoch >= drop_at {
        base / 10.0
    } else {
        base
    }
}
