//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    shape: Vec<usize>,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

/// AdamW with per-tensor moment buffers.
///
/// Buffers are created lazily on a tensor's first update and carry their own
/// step count, so a tensor whose buffers were reset after a growth event
/// gets fresh bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    lr: f32,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            lr: cfg.lr,
            cfg,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Number of completed `step` calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Updates every tensor in the store; all of them must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        self.step_named(params, names.iter().map(String::as_str))
    }

    /// Updates only the named tensors, each of which must carry a gradient.
    pub fn step_named<'a>(
        &mut self,
        params: &mut ParamStore,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let names: Vec<&str> = names.into_iter().collect();
        for &name in &names {
            let t = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if t.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let lr = self.lr;
        for name in names {
            let t = params.get_mut(name).expect("checked above");
            let shape = t.shape().to_vec();
            let decay = if shape.len() >= 2 { weight_decay } else { 0.0 };
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    shape: shape.clone(),
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                    t: 0,
                });
            if st.shape != shape {
                *st = Moments {
                    shape,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                    t: 0,
                };
            }
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let grad = t.grad().expect("checked above").to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= lr * decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Moves moment buffers along with their tensors: the new tensor `n`
    /// inherits the buffers of `provenance[n]` when the shapes still agree.
    /// Tensors without a usable source restart from zero.
    pub fn remap(&mut self, provenance: &BTreeMap<String, Option<String>>, params: &ParamStore) {
        let old = std::mem::take(&mut self.state);
        for (name, src) in provenance {
            let Some(src) = src else { continue };
            let Some(st) = old.get(src) else { continue };
            if params.get(name).is_some_and(|t| t.shape() == st.shape) {
                self.state.insert(name.clone(), st.clone());
            }
        }
    }

    /// Keeps moment buffers only for tensors that survived a growth event
    /// unchanged: the new tensor named `n` was copied from `n` itself and
    /// kept its shape. Everything else is dropped and restarts from zero.
    pub fn retain_unchanged(
        &mut self,
        provenance: &BTreeMap<String, Option<String>>,
        params: &ParamStore,
    ) {
        self.state.retain(|name, st| {
            let same_source = matches!(provenance.get(name), Some(Some(src)) if src == name);
            let same_shape = params.get(name).is_some_and(|t| t.shape() == st.shape);
            same_source && same_shape
        });
    }
}
