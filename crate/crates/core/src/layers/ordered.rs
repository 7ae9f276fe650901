//! Order-sensitive ablation: every key owns one slice per window position,
//! and there is no max over time.
//!
//! `α[m] = Σ_t dot(K[m][t], Xw[t])`, `y = relu(α)ᵀ · V`.

use rand::Rng;

use super::{eval_window, kaiming, param_struct, LayerDims};
use crate::error::{PicError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

param_struct! {
    /// Parameters of the order-sensitive layer.
    OrderedParams {
        reduce_w,
        reduce_b,
        /// Keys `[M, T, C']`, one slice per window position.
        keys,
        /// Values `[M, C']`.
        values,
        recover_w,
        recover_b,
    }
}

impl OrderedParams {
    pub fn init<R: Rng + ?Sized>(d: LayerDims, rng: &mut R) -> Self {
        Self {
            reduce_w: kaiming(&[d.channels, d.bottleneck], d.channels, rng),
            reduce_b: Tensor::zeros(&[d.bottleneck]),
            keys: kaiming(&[d.keys, d.window, d.bottleneck], d.window * d.bottleneck, rng),
            values: kaiming(&[d.keys, d.bottleneck], d.keys, rng),
            recover_w: Tensor::zeros(&[d.bottleneck, d.channels]),
            recover_b: Tensor::zeros(&[d.channels]),
        }
    }
}

fn flat_keys(tape: &mut Tape, p: &OrderedParams<NodeId>) -> Result<(NodeId, usize)> {
    let shape = tape.value(p.keys).shape().to_vec();
    if shape.len() != 3 {
        return Err(PicError::dim(format!("ordered keys must be [M, T, C'], got {shape:?}")));
    }
    let k = tape.reshape(p.keys, &[shape[0], shape[1] * shape[2]])?;
    Ok((k, shape[1]))
}

/// Sliding form over a padded sequence `zp: [B, L, C']`.
pub(crate) fn core(tape: &mut Tape, zp: NodeId, window: usize, p: &OrderedParams<NodeId>) -> Result<NodeId> {
    let (k, kt) = flat_keys(tape, p)?;
    if kt != window {
        return Err(PicError::dim(format!("ordered keys span {kt} positions, window is {window}")));
    }
    let u = tape.unfold_time(zp, window)?;
    let alpha = tape.affine(u, k, None, true)?;
    let a = tape.relu(alpha);
    tape.affine(a, p.values, None, false)
}

pub(crate) fn window_tape(tape: &mut Tape, xw: NodeId, p: &OrderedParams<NodeId>) -> Result<NodeId> {
    let xv = tape.value(xw);
    if xv.ndim() != 2 {
        return Err(PicError::dim("window must be [T, C']"));
    }
    let (t, c) = (xv.dim(0), xv.dim(1));
    let x3 = tape.reshape(xw, &[1, t, c])?;
    let y = core(tape, x3, t, p)?;
    let c_out = tape.value(y).last_dim();
    tape.reshape(y, &[c_out])
}

/// Order-sensitive window operation on `xw: [T, C']`.
pub fn pic_ordered_window(xw: &Tensor, p: &OrderedParams) -> Result<Tensor> {
    eval_window(
        xw,
        p,
        |p, tape| p.map(|_, t| tape.constant(t.clone())),
        window_tape,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> OrderedParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OrderedParams::init(
            LayerDims {
                channels: 8,
                bottleneck: 3,
                keys: 4,
                values: 4,
                window: 2,
            },
            &mut rng,
        )
    }

    fn swap_rows(x: &Tensor) -> Tensor {
        let c = x.dim(1);
        let mut d = x.row(1).to_vec();
        d.extend_from_slice(x.row(0));
        Tensor::new(&[2, c], d).unwrap()
    }

    #[test]
    fn swapping_timesteps_changes_output() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xw = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let a = pic_ordered_window(&xw, &p).unwrap();
        let b = pic_ordered_window(&swap_rows(&xw), &p).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn position_blind_keys_are_invariant() {
        let mut p = params(3);
        let (m, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let slice = Tensor::randn(&[m, c], 1.0, &mut rng);
        let mut k = Vec::new();
        for mi in 0..m {
            k.extend_from_slice(slice.row(mi));
            k.extend_from_slice(slice.row(mi));
        }
        p.keys = Tensor::new(&[m, 2, c], k).unwrap();
        let xw = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let a = pic_ordered_window(&xw, &p).unwrap();
        let b = pic_ordered_window(&swap_rows(&xw), &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_window_gives_zero() {
        let p = params(5);
        let y = pic_ordered_window(&Tensor::zeros(&[2, 3]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
