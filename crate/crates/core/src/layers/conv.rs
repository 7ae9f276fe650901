//! Standard temporal convolution in the same residual bottleneck, with
//! `C'` output channels and stride 1.

use rand::Rng;

use super::{eval_window, kaiming, param_struct, LayerDims};
use crate::error::{PicError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

param_struct! {
    /// Parameters of the temporal convolution layer.
    ConvParams {
        reduce_w,
        reduce_b,
        /// Kernel `[T·C', C']`, rows in time-major order.
        weight,
        bias,
        recover_w,
        recover_b,
    }
}

impl ConvParams {
    pub fn init<R: Rng + ?Sized>(d: LayerDims, rng: &mut R) -> Self {
        let cb = d.bottleneck;
        Self {
            reduce_w: kaiming(&[d.channels, cb], d.channels, rng),
            reduce_b: Tensor::zeros(&[cb]),
            weight: kaiming(&[d.window * cb, cb], d.window * cb, rng),
            bias: Tensor::zeros(&[cb]),
            recover_w: Tensor::zeros(&[cb, d.channels]),
            recover_b: Tensor::zeros(&[d.channels]),
        }
    }
}

pub(crate) fn core(tape: &mut Tape, zp: NodeId, window: usize, p: &ConvParams<NodeId>) -> Result<NodeId> {
    let rows = tape.value(p.weight).dim(0);
    let c = tape.value(zp).last_dim();
    if rows != window * c {
        return Err(PicError::dim(format!(
            "kernel has {rows} rows, window {window} x {c} channels needs {}",
            window * c
        )));
    }
    let u = tape.unfold_time(zp, window)?;
    tape.affine(u, p.weight, Some(p.bias), false)
}

pub(crate) fn window_tape(tape: &mut Tape, xw: NodeId, p: &ConvParams<NodeId>) -> Result<NodeId> {
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

/// Convolution output for a single window `xw: [T, C']`.
pub fn temporal_conv_window(xw: &Tensor, p: &ConvParams) -> Result<Tensor> {
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

    fn params(t: usize, cb: usize) -> ConvParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ConvParams::init(
            LayerDims {
                channels: 8,
                bottleneck: cb,
                keys: 1,
                values: 1,
                window: t,
            },
            &mut rng,
        )
    }

    /// Kernel copying the input at window position `pos`.
    fn selector(t: usize, c: usize, pos: usize) -> Tensor {
        let mut w = Tensor::zeros(&[t * c, c]);
        for ch in 0..c {
            w.set(&[pos * c + ch, ch], 1.0);
        }
        w
    }

    #[test]
    fn selector_kernel_picks_position() {
        let mut p = params(3, 2);
        p.weight = selector(3, 2, 2);
        let xw = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(temporal_conv_window(&xw, &p).unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn reversal_changes_output() {
        let mut p = params(3, 2);
        p.weight = selector(3, 2, 0);
        let xw = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rev = Tensor::new(&[3, 2], vec![5.0, 6.0, 3.0, 4.0, 1.0, 2.0]).unwrap();
        let a = temporal_conv_window(&xw, &p).unwrap();
        let b = temporal_conv_window(&rev, &p).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[5.0, 6.0]);
    }

    #[test]
    fn uniform_kernel_is_order_free_mean() {
        let (t, c) = (4, 3);
        let mut p = params(t, c);
        let mut w = Tensor::zeros(&[t * c, c]);
        for pos in 0..t {
            for ch in 0..c {
                w.set(&[pos * c + ch, ch], 1.0 / t as f64);
            }
        }
        p.weight = w;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xw = Tensor::randn(&[t, c], 1.0, &mut rng);
        let y = temporal_conv_window(&xw, &p).unwrap();
        for ch in 0..c {
            let mean: f64 = (0..t).map(|r| xw.get(&[r, ch])).sum::<f64>() / t as f64;
            assert!((y.data()[ch] - mean).abs() < 1e-12);
        }
    }
}
