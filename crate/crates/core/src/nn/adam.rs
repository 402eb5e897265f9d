use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators mirror the parameter store entry for entry.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Gradients are validated before anything is modified, so a rejected
    /// step leaves both `params` and the state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(
                "gradient store does not match parameter store".into(),
            ));
        }
        for (p, g) in params.entries().iter().zip(grads.entries()) {
            if p.value.shape() != g.value.shape() {
                return Err(Error::Config(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.value.shape(),
                    p.value.shape()
                )));
            }
            if p.trainable && !g.value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let entries = params.entries_mut();
        let (ms, vs) = (self.m.entries_mut(), self.v.entries_mut());
        for (((p, g), m), v) in entries
            .iter_mut()
            .zip(grads.entries())
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
        {
            if !p.trainable {
                continue;
            }
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.value.data())
                .zip(m.value.data_mut().iter_mut())
                .zip(v.value.data_mut().iter_mut());
            for (((w, &gi), mi), vi) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
