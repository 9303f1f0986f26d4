use serde::{Deserialize, Serialize};

use crate::error::{contract, LabError, Result};

fn default_b1() -> f64 {
    0.9
}
fn default_b2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd,
    Adam {
        #[serde(default = "default_b1")]
        b1: f64,
        #[serde(default = "default_b2")]
        b2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            b1: default_b1(),
            b2: default_b2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerSpec::Adam { b1, b2, eps } = *self {
            if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0) {
                return Err(LabError::Config(format!(
                    "adam needs b1, b2 in [0, 1) and eps > 0, got ({b1}, {b2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, lr: f64, len: usize) -> Self {
        Self {
            spec,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(contract("optimizer: parameter/gradient length mismatch"));
        }
        match self.spec {
            OptimizerSpec::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerSpec::Adam { b1, b2, eps } => {
                self.t += 1;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
