//! Momentum SGD and adaptive-moment (Adam) updates with classic L2 weight
//! decay: `g <- g + weight_decay * w` before the update rule.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd_momentum() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adaptive_moment() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdaptiveMoment,
            ..Self::sgd_momentum()
        }
    }

    /// Plain gradient descent: no momentum, no decay.
    pub fn plain_sgd() -> Self {
        OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..Self::sgd_momentum()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(field, "hyperparameter out of range"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Momentum buffer, or first-moment estimate.
    pub first: Vec<Matrix>,
    /// Second-moment estimate (adaptive variant only; empty otherwise).
    pub second: Vec<Matrix>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &impl ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        let second = match config.kind {
            OptimizerKind::SgdMomentum => Vec::new(),
            OptimizerKind::AdaptiveMoment => zeros.clone(),
        };
        OptimizerState {
            config,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut impl ParamSet, grads: &[Matrix], lr: f64) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.first.len() {
            return Err(Error::dims("optimizer tensors", self.first.len(), grads.len()));
        }
        for (i, (t, g)) in tensors.iter().zip(grads).enumerate() {
            if t.shape() != g.shape() || self.first[i].shape() != g.shape() {
                return Err(Error::dims(
                    format!("optimizer tensor {i}"),
                    format!("{:?}", t.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::SgdMomentum => {
                for ((w, g), v) in tensors.iter_mut().zip(grads).zip(&mut self.first) {
                    let w = w.as_mut_slice();
                    for ((wi, &gi), vi) in w.iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                        let gi = gi + c.weight_decay * *wi;
                        *vi = c.momentum * *vi + gi;
                        *wi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((w, g), m), v) in tensors
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let w = w.as_mut_slice();
                    for (((wi, &gi), mi), vi) in w
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        let gi = gi + c.weight_decay * *wi;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *wi -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
