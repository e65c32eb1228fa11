use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Group, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay; moments are kept per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    state: BTreeMap<ParamId, MomentState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(AdamW {
            config,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &BTreeMap<ParamId, MomentState> {
        &self.state
    }

    pub fn set_state(&mut self, id: ParamId, state: MomentState) {
        self.state.insert(id, state);
    }

    /// Updates every parameter whose group is in `groups`. Parameters outside
    /// those groups are never written, even if a gradient is present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, groups: &[Group]) {
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let n = store.value(id).len();
            let st = self.state.entry(id).or_insert_with(|| MomentState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let g = grads.param(id);
            let values = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                values[i] -= lr * weight_decay * values[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
