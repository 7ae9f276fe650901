//! Temporal layers: the permutation invariant window operation, its
//! ablation variants and a standard temporal convolution, all wrapped in a
//! residual bottleneck.

use rand::Rng;

use crate::config::{Padding, Variant};
use crate::error::{PicError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

mod conv;
mod inferred;
mod ordered;
mod pic;

pub use conv::{temporal_conv_window, ConvParams};
pub use inferred::{pic_inferred_window, InferredParams};
pub use ordered::{pic_ordered_window, OrderedParams};
pub use pic::{pic_global_forward, pic_layer_forward, pic_window, PicParams};

/// Defines a parameter struct generic over its field type, so the same
/// layout holds tensors or their tape handles.
macro_rules! param_struct {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor::Tensor> {
            $($(#[$fm])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> $name<U> {
                $name { $($field: f(stringify!($field), &self.$field)),* }
            }
        }
    };
}
pub(crate) use param_struct;

/// Widths of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    /// Input/output channels C.
    pub channels: usize,
    /// Bottleneck channels C'.
    pub bottleneck: usize,
    /// Keys M.
    pub keys: usize,
    /// Values M'.
    pub values: usize,
    /// Window T.
    pub window: usize,
}

pub(crate) fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Residual bottleneck around any window operation.
pub(crate) struct Bottleneck {
    pub reduce_w: NodeId,
    pub reduce_b: NodeId,
    pub recover_w: NodeId,
    pub recover_b: NodeId,
}

/// Zero padding (left, right) that keeps the sequence length.
pub fn same_padding(window: usize) -> (usize, usize) {
    let left = window / 2;
    (left, window - 1 - left)
}

/// Tape nodes produced by one layer application.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// Residual sum.
    pub out: NodeId,
    /// Recovered branch added to the skip path.
    pub branch: NodeId,
}

/// Parameters of one temporal layer of any variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = Tensor> {
    Pic(PicParams<T>),
    PicOrdered(OrderedParams<T>),
    PicGlobal(PicParams<T>),
    PicInferred(InferredParams<T>),
    TemporalConv(ConvParams<T>),
}

impl<T> Layer<T> {
    pub fn variant(&self) -> Variant {
        match self {
            Layer::Pic(_) => Variant::Pic,
            Layer::PicOrdered(_) => Variant::PicOrdered,
            Layer::PicGlobal(_) => Variant::PicGlobal,
            Layer::PicInferred(_) => Variant::PicInferred,
            Layer::TemporalConv(_) => Variant::TemporalConv,
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &T)> {
        match self {
            Layer::Pic(p) | Layer::PicGlobal(p) => p.fields(),
            Layer::PicOrdered(p) => p.fields(),
            Layer::PicInferred(p) => p.fields(),
            Layer::TemporalConv(p) => p.fields(),
        }
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        match self {
            Layer::Pic(p) | Layer::PicGlobal(p) => p.fields_mut(),
            Layer::PicOrdered(p) => p.fields_mut(),
            Layer::PicInferred(p) => p.fields_mut(),
            Layer::TemporalConv(p) => p.fields_mut(),
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&'static str, &T) -> U) -> Layer<U> {
        match self {
            Layer::Pic(p) => Layer::Pic(p.map(f)),
            Layer::PicGlobal(p) => Layer::PicGlobal(p.map(f)),
            Layer::PicOrdered(p) => Layer::PicOrdered(p.map(f)),
            Layer::PicInferred(p) => Layer::PicInferred(p.map(f)),
            Layer::TemporalConv(p) => Layer::TemporalConv(p.map(f)),
        }
    }
}

impl Layer {
    pub fn init<R: Rng + ?Sized>(variant: Variant, dims: LayerDims, rng: &mut R) -> Self {
        match variant {
            Variant::Pic => Layer::Pic(PicParams::init(dims, rng)),
            Variant::PicGlobal => Layer::PicGlobal(PicParams::init(dims, rng)),
            Variant::PicOrdered => Layer::PicOrdered(OrderedParams::init(dims, rng)),
            Variant::PicInferred => Layer::PicInferred(InferredParams::init(dims, rng)),
            Variant::TemporalConv => Layer::TemporalConv(ConvParams::init(dims, rng)),
        }
    }

    /// Closed-form parameter count of a layer (without normalization).
    pub fn param_count(variant: Variant, d: LayerDims) -> usize {
        let (c, cb, m, mv, t) = (d.channels, d.bottleneck, d.keys, d.values, d.window);
        let bottleneck = c * cb + cb + cb * c + c;
        bottleneck
            + match variant {
                Variant::Pic | Variant::PicGlobal => m * cb + mv * cb + m * mv + mv,
                Variant::PicOrdered => m * t * cb + m * cb,
                Variant::PicInferred => 2 * (cb * cb + cb) + t * t + t,
                Variant::TemporalConv => t * cb * cb + cb,
            }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Layer<NodeId> {
        self.map(|_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

impl Layer<NodeId> {
    fn bottleneck(&self) -> Bottleneck {
        macro_rules! bn {
            ($p:expr) => {
                Bottleneck {
                    reduce_w: $p.reduce_w,
                    reduce_b: $p.reduce_b,
                    recover_w: $p.recover_w,
                    recover_b: $p.recover_b,
                }
            };
        }
        match self {
            Layer::Pic(p) | Layer::PicGlobal(p) => bn!(p),
            Layer::PicOrdered(p) => bn!(p),
            Layer::PicInferred(p) => bn!(p),
            Layer::TemporalConv(p) => bn!(p),
        }
    }

    /// Applies the layer to `x: [B, N, C]`.
    ///
    /// `window` is the configured T (ignored by the global variant, which
    /// always spans the whole input without padding).
    pub fn forward(&self, tape: &mut Tape, x: NodeId, window: usize, padding: Padding) -> Result<LayerOutput> {
        let xv = tape.value(x);
        if xv.ndim() != 3 {
            return Err(PicError::dim(format!("layer input must be [B, N, C], got {:?}", xv.shape())));
        }
        let n = xv.dim(1);
        let (window, padding) = match self {
            Layer::PicGlobal(_) => (n, Padding::Valid),
            _ => (window, padding),
        };
        if window == 0 {
            return Err(PicError::config("window must be at least 1"));
        }
        let (left, right) = match padding {
            Padding::Same => same_padding(window),
            Padding::Valid => {
                if window > n {
                    return Err(PicError::config(format!(
                        "window {window} exceeds unpadded length {n}"
                    )));
                }
                (0, 0)
            }
        };
        let bn = self.bottleneck();
        let z = tape.affine(x, bn.reduce_w, Some(bn.reduce_b), false)?;
        let zp = tape.pad_time(z, left, right)?;
        let core = match self {
            Layer::Pic(p) | Layer::PicGlobal(p) => pic::core(tape, zp, window, p)?,
            Layer::PicOrdered(p) => ordered::core(tape, zp, window, p)?,
            Layer::PicInferred(p) => inferred::core(tape, zp, window, p)?,
            Layer::TemporalConv(p) => conv::core(tape, zp, window, p)?,
        };
        let branch = tape.affine(core, bn.recover_w, Some(bn.recover_b), false)?;
        let skip = match padding {
            Padding::Same => x,
            Padding::Valid => tape.window_mean(x, window)?,
        };
        let out = tape.add(skip, branch)?;
        Ok(LayerOutput { out, branch })
    }
}

/// Runs a window-level function on constants and returns its value.
pub(crate) fn eval_window<P, F>(xw: &Tensor, params: &P, bind: impl Fn(&P, &mut Tape) -> F, f: impl Fn(&mut Tape, NodeId, &F) -> Result<NodeId>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape);
    let x = tape.constant(xw.clone());
    let out = f(&mut tape, x, &bound)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_reflection() {
        let dims = LayerDims {
            channels: 16,
            bottleneck: 4,
            keys: 6,
            values: 3,
            window: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let layer = Layer::init(v, dims, &mut rng);
            let counted: usize = layer.fields().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(counted, Layer::param_count(v, dims), "{v}");
        }
    }

    #[test]
    fn same_padding_keeps_length() {
        for t in 1..12 {
            let (l, r) = same_padding(t);
            assert_eq!(l + r, t - 1);
        }
        assert_eq!(same_padding(9), (4, 4));
    }
}
