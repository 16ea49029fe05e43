//! First-order optimizers over [`ModelParams`].
//!
//! Parameters and optimizer slots are kept f32-representable after every
//! step so checkpoints round-trip bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(OptimizerKind::Sgd),
            1 => Ok(OptimizerKind::Adam),
            _ => Err(Error::CorruptFile(format!("unknown optimizer kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.0 }
    }
}

/// Step counter and per-parameter slots (`m/<name>`, `v/<name>`).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub slots: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState { kind, step: 0, slots: BTreeMap::new() }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Gradients of every bound parameter that received one.
pub fn collect_grads(g: &Graph, bound: &Bound) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        let state = OptimizerState::new(config.kind);
        Optimizer { config, state }
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Result<Self> {
        if state.kind != config.kind {
            return Err(Error::Config(format!(
                "optimizer state is {:?} but configuration asks for {:?}",
                state.kind, config.kind
            )));
        }
        Ok(Optimizer { config, state })
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let mut scale = 1.0;
        if self.config.clip_norm > 0.0 {
            let norm = grads.values().map(|t| t.dot(t)).sum::<f64>().sqrt();
            if norm > self.config.clip_norm {
                scale = self.config.clip_norm / norm;
            }
        }
        self.state.step += 1;
        let t = self.state.step as f64;
        let c = &self.config;
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::Dimension(format!("gradient for {name} has shape {}", grad.shape())));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    let m = self.state.slots.entry(format!("m/{name}")).or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((w, v), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(grad.data()) {
                        *v = f32_round(c.momentum * *v + scale * gv);
                        *w = f32_round(*w - lr * *v);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powf(t);
                    let bc2 = 1.0 - c.beta2.powf(t);
                    let mkey = format!("m/{name}");
                    let vkey = format!("v/{name}");
                    let mut m = self.state.slots.remove(&mkey).unwrap_or_else(|| Tensor::zeros(p.shape()));
                    let mut v = self.state.slots.remove(&vkey).unwrap_or_else(|| Tensor::zeros(p.shape()));
                    for (((w, mv), vv), &gv) in
                        p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data())
                    {
                        let gs = scale * gv;
                        *mv = f32_round(c.beta1 * *mv + (1.0 - c.beta1) * gs);
                        *vv = f32_round(c.beta2 * *vv + (1.0 - c.beta2) * gs * gs);
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *w = f32_round(*w - lr * mh / (vh.sqrt() + c.eps));
                    }
                    self.state.slots.insert(mkey, m);
                    self.state.slots.insert(vkey, v);
                }
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }
}
