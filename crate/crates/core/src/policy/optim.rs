use serde::{Deserialize, Serialize};

use crate::diffusion::{AdamMoments, PolicyParams};
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub moments: AdamMoments,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = kind {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(Self { kind, lr, moments: AdamMoments { steps: 0, m: vec![0.0; n], v: vec![0.0; n] } })
    }

    /// Resumes with saved moments.
    pub fn with_moments(mut self, moments: AdamMoments) -> Result<Self> {
        if moments.m.len() != self.moments.m.len() || moments.v.len() != self.moments.v.len() {
            return Err(Error::Dimension("optimizer moments do not match the parameter count".into()));
        }
        self.moments = moments;
        Ok(self)
    }

    /// Moves `params` along `-grad`.
    pub fn descend(&mut self, params: &mut PolicyParams, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.moments.m.len() {
            return Err(Error::Dimension("gradient length does not match parameters".into()));
        }
        ensure_finite("gradient", grad)?;
        let p = params.as_mut_slice();
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in p.iter_mut().zip(grad) {
                    *w -= self.lr * g;
                }
                self.moments.steps += 1;
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.moments.steps += 1;
                let k = self.moments.steps as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                let AdamMoments { m, v, .. } = &mut self.moments;
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }

    /// Moves `params` along `+grad`.
    pub fn ascend(&mut self, params: &mut PolicyParams, grad: &[f64]) -> Result<()> {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.descend(params, &neg)
    }
}
