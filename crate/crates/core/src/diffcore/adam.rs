//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::{Array, DiffError};

/// Adam hyperparameters. The learning-rate default matches the online
/// refinement setting; pretraining configs typically raise it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// Optimizer state: one first- and second-moment accumulator per
/// parameter, plus the step counter. The accumulators always match the
/// parameter shapes, and the counter advances by exactly one per update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    hyper: AdamParams,
    names: Vec<String>,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamState {
    pub fn new(hyper: AdamParams, params: &[(String, &Array)]) -> Self {
        AdamState {
            hyper,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, p)| Array::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|(_, p)| Array::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn hyper(&self) -> &AdamParams {
        &self.hyper
    }

    /// Adjust the learning rate (for schedules); moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Deterministic given inputs; a
    /// non-finite gradient aborts with the offending parameter name.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<(), DiffError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DiffError::OptimizerMismatch(format!(
                "expected {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in self.names.iter().zip(params.iter()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamParams { lr, beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
