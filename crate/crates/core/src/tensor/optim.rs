use std::fmt;
use std::str::FromStr;

use super::{Tensor, TensorError};

/// Learning-rate schedule. Only a constant rate is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    #[default]
    Constant,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("constant")
    }
}

impl FromStr for Scheduler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" | "constantlr" => Ok(Scheduler::Constant),
            other => Err(format!("unsupported scheduler `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWConfig { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with a constant learning rate. Weight decay is applied
/// to the parameter directly before the moment term. A `None` gradient
/// leaves both the parameter and its moments untouched.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
) -> Result<(), TensorError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer has {} slots, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.m[i].shape() {
            return Err(TensorError::Shape {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: state.m[i].shape().to_vec(),
            });
        }
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *pv -= c.learning_rate * c.weight_decay * *pv;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gv;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gv * gv;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pv -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
