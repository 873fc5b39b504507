//! Adam with bias correction and a learning rate supplied per step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every trainable parameter in `store` with rate `eta`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, eta: f64) -> Result<()> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {eta}")));
        }
        let ids: Vec<ParamId> = store.trainable().collect();
        for &id in &ids {
            match grads.get(id) {
                None => return Err(Error::Contract(format!("no gradient for trainable parameter {}", store.name(id)))),
                Some(g) if g.len() != store.get(id).numel() => {
                    return Err(Error::Contract(format!("gradient size mismatch for {}", store.name(id))))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let n = g.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= eta * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
