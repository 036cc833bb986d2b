use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
///
/// Moments are allocated lazily per parameter, shaped like the parameter.
/// Parameters whose `trainable` flag is false are never read or written.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. Fails without touching any parameter if a trainable
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        trainable: &[bool],
    ) -> Result<()> {
        if trainable.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} trainable flags for {} parameters",
                trainable.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if trainable[id.index()] {
                if let Some(g) = grads.get(id) {
                    if g.shape() != params.get(id).shape() {
                        return Err(Error::Shape(format!(
                            "gradient for {} has shape {:?}",
                            params.name(id),
                            g.shape()
                        )));
                    }
                    if !g.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite gradient for {}",
                            params.name(id)
                        )));
                    }
                }
            }
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for id in params.ids() {
            if !trainable[id.index()] {
                continue;
            }
            let shape = params.get(id).shape();
            let m = self.first[id.index()].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let v = self.second[id.index()].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let w = params.get_mut(id).as_mut_slice();
            let zero = Matrix::zeros(0, 0);
            let g = grads.get(id).unwrap_or(&zero).as_slice();
            for i in 0..w.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                let mi = &mut m.as_mut_slice()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
