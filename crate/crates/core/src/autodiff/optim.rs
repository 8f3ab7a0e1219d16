use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters, kept separate from the moment state so they can
/// live in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }
}

/// Plain SGD or bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(Optimizer {
            config,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every tensor with `requires_grad`, then clears
    /// their gradients.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::State(format!("parameter {i} has no gradient")));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::State(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        self.steps += 1;
        let cfg = &self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let data = p.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= cfg.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    for (((w, g), m), v) in data
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
