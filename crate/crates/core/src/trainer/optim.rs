use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Moment buffers and step counter; serialises into run snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// Learning rate at 1-based step `t`: linear warmup, then constant or cosine.
pub fn learning_rate(config: &OptimizerConfig, t: u64, total_steps: u64) -> f64 {
    match *config {
        OptimizerConfig::Sgd { lr } => lr,
        OptimizerConfig::AdamW {
            lr,
            warmup_steps,
            cosine,
            ..
        } => {
            if t <= warmup_steps {
                return lr * t as f64 / warmup_steps as f64;
            }
            if cosine && total_steps > warmup_steps {
                let progress = (t - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                return lr * 0.5 * (1.0 + (PI * progress.min(1.0)).cos());
            }
            lr
        }
    }
}

/// One SGD or AdamW update in place. AdamW decays weights decoupled from the
/// adaptive step: `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn optimizer_step(
    config: &OptimizerConfig,
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    total_steps: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Length {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = learning_rate(config, t, total_steps);
    match *config {
        OptimizerConfig::Sgd { .. } => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, &dx) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * dx;
                }
            }
        }
        OptimizerConfig::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } => {
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.first[i].data_mut();
                let v = state.second[i].data_mut();
                for (j, (x, &dx)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * dx;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * dx * dx;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    *x -= lr * weight_decay * *x;
                    *x -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
