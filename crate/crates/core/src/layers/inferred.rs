//! Ablation with keys and values produced from each window by dense maps
//! instead of being stored as shared parameters. With `T` inferred keys the
//! remap is `T×T`.

use rand::Rng;

use super::{eval_window, kaiming, param_struct, LayerDims};
use crate::error::{PicError, Result};
use crate::ops::TieBreak;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

param_struct! {
    /// Parameters of the inferred-kernel layer.
    InferredParams {
        reduce_w,
        reduce_b,
        /// Key map `[C', C']`.
        key_w,
        key_b,
        /// Value map `[C', C']`.
        value_w,
        value_b,
        /// Remap `[T, T]`.
        remap_w,
        remap_b,
        recover_w,
        recover_b,
    }
}

impl InferredParams {
    pub fn init<R: Rng + ?Sized>(d: LayerDims, rng: &mut R) -> Self {
        let cb = d.bottleneck;
        Self {
            reduce_w: kaiming(&[d.channels, cb], d.channels, rng),
            reduce_b: Tensor::zeros(&[cb]),
            key_w: kaiming(&[cb, cb], cb, rng),
            key_b: Tensor::zeros(&[cb]),
            value_w: kaiming(&[cb, cb], cb, rng),
            value_b: Tensor::zeros(&[cb]),
            remap_w: kaiming(&[d.window, d.window], d.window, rng),
            remap_b: Tensor::zeros(&[d.window]),
            recover_w: Tensor::zeros(&[cb, d.channels]),
            recover_b: Tensor::zeros(&[d.channels]),
        }
    }
}

/// Applies the operation to `g` windows stacked as `u: [G, T, C']`,
/// giving `[G, 1, C']`.
fn windows(tape: &mut Tape, u: NodeId, p: &InferredParams<NodeId>) -> Result<NodeId> {
    let shape = tape.value(u).shape().to_vec();
    let (g, t) = (shape[0], shape[1]);
    let rt = tape.value(p.remap_w).dim(0);
    if rt != t {
        return Err(PicError::dim(format!("remap sized for window {rt}, got {t}")));
    }
    let keys = tape.affine(u, p.key_w, Some(p.key_b), false)?;
    let values = tape.affine(u, p.value_w, Some(p.value_b), false)?;
    let s = tape.batched_matmul(keys, u, true)?;
    let s_max = tape.row_max(s, TieBreak::Lowest)?;
    let pre = tape.affine(s_max, p.remap_w, Some(p.remap_b), false)?;
    let alpha = tape.relu(pre);
    let a3 = tape.reshape(alpha, &[g, 1, t])?;
    tape.batched_matmul(a3, values, false)
}

pub(crate) fn core(tape: &mut Tape, zp: NodeId, window: usize, p: &InferredParams<NodeId>) -> Result<NodeId> {
    let u = tape.unfold_time(zp, window)?;
    let shape = tape.value(u).shape().to_vec();
    let (b, lout) = (shape[0], shape[1]);
    let c = shape[2] / window;
    let u3 = tape.reshape(u, &[b * lout, window, c])?;
    let y = windows(tape, u3, p)?;
    tape.reshape(y, &[b, lout, c])
}

pub(crate) fn window_tape(tape: &mut Tape, xw: NodeId, p: &InferredParams<NodeId>) -> Result<NodeId> {
    let xv = tape.value(xw);
    if xv.ndim() != 2 {
        return Err(PicError::dim("window must be [T, C']"));
    }
    let (t, c) = (xv.dim(0), xv.dim(1));
    let u = tape.reshape(xw, &[1, t, c])?;
    let y = windows(tape, u, p)?;
    tape.reshape(y, &[c])
}

/// Inferred-kernel window operation on `xw: [T, C']`.
pub fn pic_inferred_window(xw: &Tensor, p: &InferredParams) -> Result<Tensor> {
    eval_window(
        xw,
        p,
        |p, tape| p.map(|_, t| tape.constant(t.clone())),
        window_tape,
    )
}
