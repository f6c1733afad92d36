use std::collections::HashMap;

use super::params::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: HashMap<ParamGroup, f64>,
}

impl AdamConfig {
    /// The same learning rate for every group.
    pub fn uniform(lr: f64) -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: ParamGroup::ALL.iter().map(|&g| (g, lr)).collect(),
        }
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        self.lr.get(&group).copied().unwrap_or(0.0)
    }
}

/// Bias-corrected Adam with per-parameter moment buffers and step counts.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) {
        self.state.insert(id, moments);
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::InvalidArgument("adam step without gradients".into()));
        }
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        for (id, g) in grads {
            let lr = self.config.lr_for(store.group(*id));
            let value = store.tensor_mut(*id).data_mut();
            if value.len() != g.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of length {} for {} values", g.len(), value.len()),
                ));
            }
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
