//! Shared key/value window operation.
//!
//! For a window `Xw: [T, C']` the keys score every timestep, the best score
//! per key survives, a dense remap mixes the surviving scores and the
//! rectified result weights the value vectors:
//!
//! ```text
//! s  = K · Xwᵀ            [M, T]
//! s' = max over t of s    [M]
//! α  = relu(s'·F + f)     [M']
//! y  = αᵀ · V             [C']
//! ```
//!
//! Only the max over `t` touches the time axis, so `y` depends on the window
//! as a multiset of rows.

use rand::Rng;

use super::{eval_window, kaiming, param_struct, Layer, LayerDims};
use crate::config::Padding;
use crate::error::{PicError, Result};
use crate::ops::TieBreak;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

param_struct! {
    /// Parameters of a shared key/value layer.
    PicParams {
        /// `[C, C']`
        reduce_w,
        /// `[C']`
        reduce_b,
        /// Keys `[M, C']`.
        keys,
        /// Values `[M', C']`.
        values,
        /// Remap `[M, M']`.
        remap_w,
        /// `[M']`
        remap_b,
        /// `[C', C]`
        recover_w,
        /// `[C]`
        recover_b,
    }
}

impl PicParams {
    pub fn init<R: Rng + ?Sized>(d: LayerDims, rng: &mut R) -> Self {
        Self {
            reduce_w: kaiming(&[d.channels, d.bottleneck], d.channels, rng),
            reduce_b: Tensor::zeros(&[d.bottleneck]),
            keys: kaiming(&[d.keys, d.bottleneck], d.bottleneck, rng),
            values: kaiming(&[d.values, d.bottleneck], d.values, rng),
            remap_w: kaiming(&[d.keys, d.values], d.keys, rng),
            remap_b: Tensor::zeros(&[d.values]),
            recover_w: Tensor::zeros(&[d.bottleneck, d.channels]),
            recover_b: Tensor::zeros(&[d.channels]),
        }
    }

    pub(crate) fn bind_const(&self, tape: &mut Tape) -> PicParams<NodeId> {
        self.map(|_, t| tape.constant(t.clone()))
    }
}

/// Window operation on the tape; `xw: [T, C']` gives `[C']`.
pub(crate) fn window_tape(tape: &mut Tape, xw: NodeId, p: &PicParams<NodeId>, tie: TieBreak) -> Result<NodeId> {
    let xv = tape.value(xw);
    if xv.ndim() != 2 {
        return Err(PicError::dim(format!("window must be [T, C'], got {:?}", xv.shape())));
    }
    let (t, c) = (xv.dim(0), xv.dim(1));
    let kv = tape.value(p.keys);
    if kv.dim(1) != c {
        return Err(PicError::dim(format!("keys have {} channels, window has {c}", kv.dim(1))));
    }
    let m = kv.dim(0);
    let k3 = tape.reshape(p.keys, &[1, m, c])?;
    let x3 = tape.reshape(xw, &[1, t, c])?;
    let s = tape.batched_matmul(k3, x3, true)?;
    let s2 = tape.reshape(s, &[m, t])?;
    let s_max = tape.row_max(s2, tie)?;
    let s_row = tape.reshape(s_max, &[1, m])?;
    let pre = tape.affine(s_row, p.remap_w, Some(p.remap_b), false)?;
    let alpha = tape.relu(pre);
    let y = tape.affine(alpha, p.values, None, false)?;
    let c_out = tape.value(y).last_dim();
    tape.reshape(y, &[c_out])
}

/// The window operation on an already reduced window `xw: [T, C']`.
pub fn pic_window(xw: &Tensor, p: &PicParams) -> Result<Tensor> {
    eval_window(xw, p, PicParams::bind_const, |tape, x, b| {
        window_tape(tape, x, b, TieBreak::Lowest)
    })
}

/// Sliding-window form over a padded sequence `zp: [B, L, C']`.
///
/// Similarities are computed once per timestep and then max-pooled over
/// every length-`window` span, which equals running the window operation at
/// each position.
pub(crate) fn core(tape: &mut Tape, zp: NodeId, window: usize, p: &PicParams<NodeId>) -> Result<NodeId> {
    let sim = tape.affine(zp, p.keys, None, true)?;
    let s_max = tape.window_max(sim, window, 1, false)?;
    let pre = tape.affine(s_max, p.remap_w, Some(p.remap_b), false)?;
    let alpha = tape.relu(pre);
    tape.affine(alpha, p.values, None, false)
}

fn run_layer(x: &Tensor, layer: Layer, window: usize, padding: Padding) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape, false);
    let xn = tape.constant(x.clone());
    let out = bound.forward(&mut tape, xn, window, padding)?;
    Ok(tape.value(out.out).clone())
}

/// Full residual layer: `X + h(pic(g(X)))` with a sliding window of size
/// `window`.
pub fn pic_layer_forward(x: &Tensor, p: &PicParams, window: usize, padding: Padding) -> Result<Tensor> {
    if x.ndim() != 3 || x.dim(1) == 0 {
        return Err(PicError::dim("layer input must be [B, N, C] with N >= 1"));
    }
    run_layer(x, Layer::Pic(p.clone()), window, padding)
}

/// One window spanning the whole sequence: `[B, N, C] -> [B, 1, C]`.
pub fn pic_global_forward(x: &Tensor, p: &PicParams) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(PicError::dim("layer input must be [B, N, C]"));
    }
    run_layer(x, Layer::PicGlobal(p.clone()), x.dim(1), Padding::Valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize, cb: usize, m: usize, mv: usize, t: usize) -> LayerDims {
        LayerDims {
            channels: c,
            bottleneck: cb,
            keys: m,
            values: mv,
            window: t,
        }
    }

    #[test]
    fn hand_traced_single_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PicParams::init(dims(8, 2, 1, 1, 3), &mut rng);
        p.keys = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        p.values = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        p.remap_w = Tensor::identity(1);
        p.remap_b = Tensor::zeros(&[1]);
        let xw = Tensor::new(&[3, 2], vec![0.5, 9.0, 2.0, -1.0, -3.0, 4.0]).unwrap();
        let y = pic_window(&xw, &p).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_keys_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PicParams::init(dims(8, 2, 4, 3, 3), &mut rng);
        p.keys = Tensor::zeros(&[4, 2]);
        p.remap_b = Tensor::new(&[3], vec![-0.5, 0.0, -2.0]).unwrap();
        let xw = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let y = pic_window(&xw, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_recovery_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PicParams::init(dims(8, 2, 4, 4, 3), &mut rng);
        let x = Tensor::randn(&[2, 7, 8], 1.0, &mut rng);
        let y = pic_layer_forward(&x, &p, 3, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn global_equals_full_valid_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PicParams::init(dims(8, 2, 4, 4, 3), &mut rng);
        p.recover_w = Tensor::randn(&[2, 8], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut rng);
        let g = pic_global_forward(&x, &p).unwrap();
        let l = pic_layer_forward(&x, &p, 6, Padding::Valid).unwrap();
        assert_eq!(g.shape(), &[2, 1, 8]);
        assert!(g.bitwise_eq(&l));
    }

    #[test]
    fn rejects_bad_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PicParams::init(dims(8, 2, 4, 4, 3), &mut rng);
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        assert!(matches!(
            pic_layer_forward(&x, &p, 0, Padding::Same),
            Err(PicError::Config(_))
        ));
        assert!(pic_window(&Tensor::zeros(&[3, 5]), &p).is_err());
    }
}
