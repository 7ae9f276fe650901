//! Momentum SGD and Adam.
//!
//! Weight decay is an L2 term added to the gradient of weights only; biases
//! and normalization scale/shift are never decayed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{OptimizerConfig, OptimizerKind};
use crate::error::{PicError, Result};
use crate::network::{param_kind, ParamKind};
use crate::persist::{self, FORMAT_VERSION, OPTIM_MAGIC};
use crate::tensor::Tensor;

/// Per-parameter buffers. `first` is the SGD velocity or Adam's first
/// moment; `second` is Adam's second moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub first: Tensor,
    pub second: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: Vec<Slot>,
}

impl OptState {
    pub fn new(config: &OptimizerConfig, params: &[(String, &Tensor)]) -> Self {
        let adam = config.kind == OptimizerKind::Adam;
        let slots = params
            .iter()
            .map(|(name, t)| Slot {
                name: name.clone(),
                first: Tensor::zeros(t.shape()),
                second: adam.then(|| Tensor::zeros(t.shape())),
            })
            .collect();
        Self {
            config: config.clone(),
            step: 0,
            slots,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&OptHeader {
            format_version: FORMAT_VERSION,
            optimizer: self.config.clone(),
            step: self.step,
        })
        .expect("header serializes");
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for s in &self.slots {
            arrays.push((format!("first.{}", s.name), &s.first));
            if let Some(v) = &s.second {
                arrays.push((format!("second.{}", s.name), v));
            }
        }
        persist::encode(OPTIM_MAGIC, &header, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = persist::decode(OPTIM_MAGIC, bytes)?;
        let h: OptHeader =
            serde_json::from_str(&c.header).map_err(|e| PicError::Format(format!("optimizer header: {e}")))?;
        let mut slots: Vec<Slot> = Vec::new();
        for (name, t) in &c.arrays {
            if let Some(n) = name.strip_prefix("first.") {
                slots.push(Slot {
                    name: n.to_string(),
                    first: t.clone(),
                    second: None,
                });
            } else if let Some(n) = name.strip_prefix("second.") {
                let slot = slots
                    .iter_mut()
                    .find(|s| s.name == n)
                    .ok_or_else(|| PicError::Format(format!("second moment `{n}` without first")))?;
                if slot.first.shape() != t.shape() {
                    return Err(PicError::Format(format!("moment shapes differ for `{n}`")));
                }
                slot.second = Some(t.clone());
            } else {
                return Err(PicError::Format(format!("unexpected array `{name}`")));
            }
        }
        let adam = h.optimizer.kind == OptimizerKind::Adam;
        if slots.iter().any(|s| s.second.is_some() != adam) {
            return Err(PicError::Format("moment buffers do not match optimizer kind".into()));
        }
        Ok(Self {
            config: h.optimizer,
            step: h.step,
            slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptHeader {
    format_version: u32,
    optimizer: OptimizerConfig,
    step: u64,
}

fn check(params: &[(String, &mut Tensor)], grads: &[Tensor], state: &OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(PicError::dim(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for (((name, p), g), s) in params.iter().zip(grads).zip(&state.slots) {
        if p.shape() != g.shape() || p.shape() != s.first.shape() || *name != s.name {
            return Err(PicError::dim(format!("gradient or buffer mismatch for `{name}`")));
        }
        if !g.is_finite() {
            return Err(PicError::NonFiniteGradient(name.clone()));
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Gradient scale from the optional global-norm clip.
fn clip_scale(cfg: &OptimizerConfig, grads: &[Tensor]) -> f64 {
    match cfg.clip_norm {
        Some(c) => {
            let n = grad_norm(grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

fn decay(cfg: &OptimizerConfig, name: &str) -> f64 {
    match param_kind(name) {
        ParamKind::Weight => cfg.weight_decay,
        ParamKind::Bias | ParamKind::Norm => 0.0,
    }
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut [(String, &mut Tensor)], grads: &[Tensor], state: &mut OptState) -> Result<()> {
    check(params, grads, state)?;
    let cfg = state.config.clone();
    let scale = clip_scale(&cfg, grads);
    state.step += 1;
    for (((name, p), g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        let wd = decay(&cfg, name);
        let v = slot.first.data_mut();
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = cfg.momentum * *vv + (scale * gv + wd * *pv);
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(params: &mut [(String, &mut Tensor)], grads: &[Tensor], state: &mut OptState) -> Result<()> {
    check(params, grads, state)?;
    let cfg = state.config.clone();
    let scale = clip_scale(&cfg, grads);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((name, p), g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        let wd = decay(&cfg, name);
        let second = slot
            .second
            .as_mut()
            .ok_or_else(|| PicError::config("optimizer state has no second moments"))?;
        let m = slot.first.data_mut();
        let v = second.data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gt = scale * gv + wd * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gt;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gt * gt;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Dispatches on the configured optimizer.
pub fn step(params: &mut [(String, &mut Tensor)], grads: &[Tensor], state: &mut OptState) -> Result<()> {
    match state.config.kind {
        OptimizerKind::Sgd => sgd_step(params, grads, state),
        OptimizerKind::Adam => adam_step(params, grads, state),
    }
}
