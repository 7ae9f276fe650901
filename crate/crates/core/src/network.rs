//! Cascade of temporal blocks (layer, batch norm, leaky rectifier, temporal
//! max pooling) followed by global average pooling and a two-layer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Padding, RunConfig, Task, Variant};
use crate::error::{PicError, Result};
use crate::gradcheck::{grad_check_tape, GradCheckReport};
use crate::layers::{kaiming, Layer, LayerDims, LayerOutput};
use crate::ops::{BatchNormState, NormMode, RunningStats};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One cascade stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layer: Layer,
    pub norm: BatchNormState,
    pub window: usize,
    pub padding: Padding,
    pub pool_stride: usize,
}

/// Two affine layers with a normalized, rectified hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub norm: BatchNormState,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub config: RunConfig,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// How weight decay treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

pub fn param_kind(name: &str) -> ParamKind {
    let field = name.rsplit('.').next().unwrap_or(name);
    if field.starts_with("norm_") {
        ParamKind::Norm
    } else if field.ends_with("_b") || field == "bias" {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

/// Class labels for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<usize>),
    /// Multi-hot `[B, classes]`.
    Multi(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Labels::Single(_) => Task::SingleLabel,
            Labels::Multi(_) => Task::MultiLabel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub node: NodeId,
}

/// Softmax cross-entropy (single label) or mean per-class sigmoid binary
/// cross-entropy (multi label).
pub fn loss(tape: &mut Tape, logits: NodeId, labels: &Labels) -> Result<LossValue> {
    let (node, per_sample) = match labels {
        Labels::Single(y) => tape.softmax_cross_entropy(logits, y)?,
        Labels::Multi(t) => tape.sigmoid_cross_entropy(logits, t)?,
    };
    Ok(LossValue {
        value: tape.value(node).data()[0],
        per_sample,
        node,
    })
}

/// Loss of plain logits.
pub fn loss_value(logits: &Tensor, labels: &Labels) -> Result<LossValue> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    loss(&mut tape, l, labels)
}

/// Handles of a model bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub blocks: Vec<BoundBlock>,
    pub head: BoundHead,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub layer: Layer<NodeId>,
    pub norm_scale: NodeId,
    pub norm_shift: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    pub hidden_w: NodeId,
    pub hidden_b: NodeId,
    pub norm_scale: NodeId,
    pub norm_shift: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl BoundModel {
    /// Parameter handles in [`CascadeModel::params`] order.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.layer.fields().into_iter().map(|(_, &id)| id));
            out.push(b.norm_scale);
            out.push(b.norm_shift);
        }
        let h = &self.head;
        out.extend([h.hidden_w, h.hidden_b, h.norm_scale, h.norm_shift, h.out_w, h.out_b]);
        out
    }
}

/// Tape nodes of one block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: NodeId,
    pub layer: LayerOutput,
    /// After normalization and activation, before pooling.
    pub activated: NodeId,
    pub pooled: NodeId,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub pooled: NodeId,
    pub logits: NodeId,
    /// Batch statistics of every norm (blocks, then head) in train mode.
    pub batch_stats: Vec<Option<RunningStats>>,
}

/// Gradients and statistics of one train-mode pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: Vec<Tensor>,
    pub batch_stats: Vec<Option<RunningStats>>,
}

/// Sequence length after each block for an input of length `n`.
pub fn temporal_lengths(cfg: &RunConfig, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(PicError::config("sequence length must be at least 1"));
    }
    let mut lengths = Vec::with_capacity(cfg.depth);
    let mut len = n;
    for block in 0..cfg.depth {
        let after_layer = match (cfg.variant, cfg.padding) {
            (Variant::PicGlobal, _) => 1,
            (_, Padding::Same) => len,
            (_, Padding::Valid) => {
                if cfg.window > len {
                    return Err(PicError::config(format!(
                        "block {block}: window {} exceeds sequence length {len}",
                        cfg.window
                    )));
                }
                len - cfg.window + 1
            }
        };
        len = after_layer.div_ceil(cfg.stride);
        lengths.push(len);
    }
    Ok(lengths)
}

impl CascadeModel {
    pub fn layer_dims(cfg: &RunConfig) -> LayerDims {
        LayerDims {
            channels: cfg.channels,
            bottleneck: cfg.bottleneck_width(),
            keys: cfg.keys,
            values: cfg.values,
            window: cfg.window,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_b.numel()
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.layer.fields() {
                out.push((format!("block{i}.{name}"), t));
            }
            out.push((format!("block{i}.norm_scale"), &b.norm.scale));
            out.push((format!("block{i}.norm_shift"), &b.norm.shift));
        }
        let h = &self.head;
        out.push(("head.hidden_w".into(), &h.hidden_w));
        out.push(("head.hidden_b".into(), &h.hidden_b));
        out.push(("head.norm_scale".into(), &h.norm.scale));
        out.push(("head.norm_shift".into(), &h.norm.shift));
        out.push(("head.out_w".into(), &h.out_w));
        out.push(("head.out_b".into(), &h.out_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.layer.fields_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
            out.push((format!("block{i}.norm_scale"), &mut b.norm.scale));
            out.push((format!("block{i}.norm_shift"), &mut b.norm.shift));
        }
        let h = &mut self.head;
        out.push(("head.hidden_w".into(), &mut h.hidden_w));
        out.push(("head.hidden_b".into(), &mut h.hidden_b));
        out.push(("head.norm_scale".into(), &mut h.norm.scale));
        out.push(("head.norm_shift".into(), &mut h.norm.shift));
        out.push(("head.out_w".into(), &mut h.out_w));
        out.push(("head.out_b".into(), &mut h.out_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every parameter; `values` follows [`Self::params`] order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(PicError::dim(format!(
                "model has {} parameters, got {}",
                slots.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(PicError::dim(format!(
                    "`{name}` expects shape {:?}, got {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    /// Running statistics of every norm, blocks first, then the head.
    pub fn norms(&self) -> Vec<&BatchNormState> {
        let mut out: Vec<&BatchNormState> = self.blocks.iter().map(|b| &b.norm).collect();
        out.push(&self.head.norm);
        out
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormState> {
        let mut out: Vec<&mut BatchNormState> = self.blocks.iter_mut().map(|b| &mut b.norm).collect();
        out.push(&mut self.head.norm);
        out
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[Option<RunningStats>]) {
        for (norm, s) in self.norms_mut().into_iter().zip(stats) {
            if let Some(s) = s {
                norm.running = Some(RunningStats::update(norm.running.as_ref(), s));
            }
        }
    }

    /// Sets running statistics from a single train-mode pass over `x`,
    /// replacing whatever was there.
    pub fn calibrate(&mut self, x: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xn = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, &bound, xn, NormMode::Train)?;
        for (norm, s) in self.norms_mut().into_iter().zip(trace.batch_stats) {
            norm.running = s;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut bind = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let layer = b.layer.map(|_, t| bind(t));
            let norm_scale = bind(&b.norm.scale);
            let norm_shift = bind(&b.norm.shift);
            blocks.push(BoundBlock {
                layer,
                norm_scale,
                norm_shift,
            });
        }
        let h = &self.head;
        let head = BoundHead {
            hidden_w: bind(&h.hidden_w),
            hidden_b: bind(&h.hidden_b),
            norm_scale: bind(&h.norm.scale),
            norm_shift: bind(&h.norm.shift),
            out_w: bind(&h.out_w),
            out_b: bind(&h.out_b),
        };
        BoundModel { blocks, head }
    }

    /// Binds to existing tape nodes given in [`Self::params`] order.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let expected = self.params().len();
        if ids.len() != expected {
            return Err(PicError::dim(format!("{expected} parameter nodes required, got {}", ids.len())));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let layer = b.layer.map(|_, _| next());
            let norm_scale = next();
            let norm_shift = next();
            blocks.push(BoundBlock {
                layer,
                norm_scale,
                norm_shift,
            });
        }
        let head = BoundHead {
            hidden_w: next(),
            hidden_b: next(),
            norm_scale: next(),
            norm_shift: next(),
            out_w: next(),
            out_b: next(),
        };
        Ok(BoundModel { blocks, head })
    }

    /// Central-difference check of the train-mode loss gradient with
    /// respect to every parameter and the input.
    pub fn grad_check(&self, x: &Tensor, labels: &Labels, h: f64, tol: f64) -> Result<GradCheckReport> {
        let mut params: Vec<(String, Tensor)> = self.params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        params.push(("input".into(), x.clone()));
        let np = params.len() - 1;
        grad_check_tape(
            &params,
            |tape, ids| {
                let bound = self.bind_nodes(&ids[..np])?;
                let trace = self.forward_tape(tape, &bound, ids[np], NormMode::Train)?;
                Ok(loss(tape, trace.logits, labels)?.node)
            },
            h,
            tol,
        )
    }

    /// Full forward pass of `x: [B, N, C]` on a tape.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundModel, x: NodeId, mode: NormMode) -> Result<ForwardTrace> {
        let xv = tape.value(x);
        if xv.ndim() != 3 || xv.last_dim() != self.config.channels {
            return Err(PicError::dim(format!(
                "input must be [B, N, {}], got {:?}",
                self.config.channels,
                xv.shape()
            )));
        }
        let mut stats = Vec::with_capacity(self.blocks.len() + 1);
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (block, b) in self.blocks.iter().zip(&bound.blocks) {
            let layer = b.layer.forward(tape, h, block.window, block.padding)?;
            let (normed, s) = tape.batch_norm(layer.out, b.norm_scale, b.norm_shift, mode, block.norm.running.as_ref())?;
            stats.push(s);
            let activated = tape.leaky_relu(normed);
            let pooled = tape.window_max(activated, block.pool_stride, block.pool_stride, true)?;
            traces.push(BlockTrace {
                input: h,
                layer,
                activated,
                pooled,
            });
            h = pooled;
        }
        let pooled = tape.mean_time(h)?;
        let hb = &bound.head;
        let hidden = tape.affine(pooled, hb.hidden_w, Some(hb.hidden_b), false)?;
        let (normed, s) = tape.batch_norm(hidden, hb.norm_scale, hb.norm_shift, mode, self.head.norm.running.as_ref())?;
        stats.push(s);
        let act = tape.relu(normed);
        let logits = tape.affine(act, hb.out_w, Some(hb.out_b), false)?;
        Ok(ForwardTrace {
            blocks: traces,
            pooled,
            logits,
            batch_stats: stats,
        })
    }

    /// Logits `[B, classes]`. Does not modify the model; train mode uses
    /// batch statistics without folding them in.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xn = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, &bound, xn, mode)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Eval-mode logits, splitting the batch across up to `threads` workers.
    /// Rows are independent in eval mode, so the result does not depend on
    /// the split.
    pub fn predict(&self, x: &Tensor, threads: usize) -> Result<Tensor> {
        let b = x.dim(0);
        let workers = threads.clamp(1, b.max(1));
        if workers == 1 {
            return self.forward(x, NormMode::Eval);
        }
        let per = b.div_ceil(workers);
        let row = x.numel() / b;
        let chunks: Vec<Tensor> = (0..b)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(b);
                let mut shape = x.shape().to_vec();
                shape[0] = end - start;
                Tensor::new(&shape, x.data()[start * row..end * row].to_vec())
            })
            .collect::<Result<_>>()?;
        let outs: Vec<Result<Tensor>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|c| s.spawn(move || self.forward(c, NormMode::Eval)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut data = Vec::with_capacity(b * self.num_classes());
        for o in outs {
            data.extend_from_slice(o?.data());
        }
        Tensor::new(&[b, self.num_classes()], data)
    }

    /// Train-mode loss, gradients in [`Self::params`] order and batch
    /// statistics.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &Labels) -> Result<StepOutput> {
        if labels.task() != self.config.task {
            return Err(PicError::Validation(format!(
                "labels are {:?} but the model is {:?}",
                labels.task(),
                self.config.task
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let xn = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, &bound, xn, NormMode::Train)?;
        let lv = loss(&mut tape, trace.logits, labels)?;
        let grads = tape.backward(lv.node)?;
        let grads = bound
            .nodes()
            .into_iter()
            .map(|id| grads.get_or_zeros(id, tape.value(id)))
            .collect();
        Ok(StepOutput {
            loss: lv.value,
            per_sample: lv.per_sample,
            grads,
            batch_stats: trace.batch_stats,
        })
    }
}

/// Builds a freshly initialized model; initialization is a function of
/// `cfg.seed` only.
pub fn build_cascade(cfg: &RunConfig) -> Result<CascadeModel> {
    cfg.validate_model()?;
    temporal_lengths(cfg, cfg.data.timesteps)?;
    let dims = CascadeModel::layer_dims(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks = (0..cfg.depth)
        .map(|_| Block {
            layer: Layer::init(cfg.variant, dims, &mut rng),
            norm: BatchNormState::new(cfg.channels),
            window: cfg.window,
            padding: cfg.padding,
            pool_stride: cfg.stride,
        })
        .collect();
    let (c, hw, k) = (cfg.channels, cfg.hidden_width(), cfg.num_classes());
    let head = Head {
        hidden_w: kaiming(&[c, hw], c, &mut rng),
        hidden_b: Tensor::zeros(&[hw]),
        norm: BatchNormState::new(hw),
        out_w: kaiming(&[hw, k], hw, &mut rng),
        out_b: Tensor::zeros(&[k]),
    };
    Ok(CascadeModel {
        config: cfg.clone(),
        blocks,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, Activation};

    fn tiny(variant: Variant) -> RunConfig {
        let mut cfg = RunConfig {
            variant,
            depth: 2,
            window: 3,
            keys: 4,
            values: 4,
            channels: 8,
            ..RunConfig::default()
        };
        cfg.data.timesteps = 8;
        cfg.data.num_classes = 3;
        cfg
    }

    #[test]
    fn temporal_lengths_halve() {
        let cfg = RunConfig::default();
        assert_eq!(temporal_lengths(&cfg, 64).unwrap(), vec![32, 16, 8, 4]);
        assert_eq!(temporal_lengths(&cfg, 9).unwrap(), vec![5, 3, 2, 1]);
        let g = RunConfig {
            variant: Variant::PicGlobal,
            depth: 2,
            ..RunConfig::default()
        };
        assert_eq!(temporal_lengths(&g, 64).unwrap(), vec![1, 1]);
        let v = RunConfig {
            padding: Padding::Valid,
            window: 9,
            ..RunConfig::default()
        };
        assert!(temporal_lengths(&v, 32).is_err());
    }

    #[test]
    fn depth_zero_is_pool_and_head() {
        let cfg = RunConfig {
            depth: 0,
            ..tiny(Variant::Pic)
        };
        let m = build_cascade(&cfg).unwrap();
        assert!(m.blocks.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 5, 8], 1.0, &mut rng);
        let logits = m.forward(&x, NormMode::Train).unwrap();
        let pooled = ops::mean_time(&x).unwrap();
        let mut hn = m.head.norm.clone();
        let hidden = ops::affine(&pooled, &m.head.hidden_w, Some(&m.head.hidden_b)).unwrap();
        let act = ops::activation(&ops::batch_norm(&hidden, &mut hn, NormMode::Train).unwrap(), Activation::Relu);
        let expected = ops::affine(&act, &m.head.out_w, Some(&m.head.out_b)).unwrap();
        assert!(logits.bitwise_eq(&expected));
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = tiny(Variant::PicInferred);
        assert_eq!(build_cascade(&cfg).unwrap(), build_cascade(&cfg).unwrap());
        let other = RunConfig { seed: 1, ..cfg.clone() };
        assert_ne!(build_cascade(&cfg).unwrap(), build_cascade(&other).unwrap());
    }

    #[test]
    fn logits_shape_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        for v in Variant::ALL {
            let m = build_cascade(&tiny(v)).unwrap();
            assert_eq!(m.forward(&x, NormMode::Train).unwrap().shape(), &[2, 3], "{v}");
        }
    }

    #[test]
    fn eval_requires_running_stats() {
        let m = build_cascade(&tiny(Variant::Pic)).unwrap();
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(m.forward(&x, NormMode::Eval), Err(PicError::UninitializedStats)));
    }

    #[test]
    fn param_kinds() {
        assert_eq!(param_kind("block0.reduce_w"), ParamKind::Weight);
        assert_eq!(param_kind("block0.keys"), ParamKind::Weight);
        assert_eq!(param_kind("block1.bias"), ParamKind::Bias);
        assert_eq!(param_kind("head.out_b"), ParamKind::Bias);
        assert_eq!(param_kind("head.norm_scale"), ParamKind::Norm);
    }

    #[test]
    fn loss_uniform_and_saturated() {
        let k = 5;
        let lv = loss_value(&Tensor::zeros(&[3, k]), &Labels::Single(vec![0, 2, 4])).unwrap();
        assert!((lv.value - (k as f64).ln()).abs() < 1e-12);
        let logits = Tensor::new(&[2, 2], vec![30.0, -30.0, -30.0, 30.0]).unwrap();
        let targets = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(loss_value(&logits, &Labels::Multi(targets)).unwrap().value < 1e-9);
        let single = Tensor::new(&[2, 2], vec![60.0, 0.0, 0.0, 60.0]).unwrap();
        assert!(loss_value(&single, &Labels::Single(vec![0, 1])).unwrap().value < 1e-9);
        assert!(loss_value(&single, &Labels::Single(vec![0, 2])).is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        for v in Variant::ALL {
            let mut m = build_cascade(&tiny(v)).unwrap();
            let vals: Vec<Tensor> = m.params().iter().map(|(_, t)| Tensor::randn(t.shape(), 0.5, &mut rng)).collect();
            m.set_params(&vals).unwrap();
            let report = m.grad_check(&x, &Labels::Single(vec![0, 2]), 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{v}\n{report}");
        }
    }
}
