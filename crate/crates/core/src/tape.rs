//! Define-by-run reverse-mode differentiation.
//!
//! Each primitive computes its value eagerly and records what it needs for
//! the backward pass. [`Tape::backward`] replays the records in reverse
//! insertion order, so gradients are bitwise reproducible for identical
//! inputs. A tape is single-threaded; build one per forward pass.

use crate::error::{PicError, Result};
use crate::ops::{self, NormMode, RunningStats, TieBreak, LEAKY_SLOPE, ZERO_INDEX};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        trans_w: bool,
    },
    BatchedMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId),
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Reshape(NodeId),
    WindowMean {
        x: NodeId,
        window: usize,
    },
    MeanTime(NodeId),
    BatchNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SigmoidCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations and saved activations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by dense products so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// `x·W + b` over the trailing axis of `x`; `W` is `p×q`, or `q×p` when
    /// `trans_w` is set.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, trans_w: bool) -> Result<NodeId> {
        let wv = &self.nodes[w.0].value;
        let value = if trans_w {
            let wt = wv.transpose()?;
            let xv = &self.nodes[x.0].value;
            if xv.last_dim() != wt.dim(0) {
                return Err(PicError::dim(format!(
                    "affine input {:?} against transposed weight {:?}",
                    xv.shape(),
                    wv.shape()
                )));
            }
            let rows = xv.rows();
            let (p, q) = (wt.dim(0), wt.dim(1));
            let mut out = vec![0.0; rows * q];
            ops::matmul_nt_into(xv.data(), wv.data(), &mut out, rows, p, q);
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                if bv.numel() != q {
                    return Err(PicError::dim("affine bias size mismatch"));
                }
                for row in out.chunks_mut(q) {
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = q;
            Tensor::from_parts(shape, out).ensure_finite("affine")?
        } else {
            ops::affine(&self.nodes[x.0].value, wv, b.map(|b| &self.nodes[b.0].value))?
        };
        let xv = &self.nodes[x.0].value;
        self.macs += (xv.rows() * wv.numel()) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Affine { x, w, b, trans_w }, rg))
    }

    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let value = ops::batched_matmul(av, &self.nodes[b.0].value, trans_b)?;
        let (g, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        self.macs += (g * m * k * value.dim(2)) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::BatchedMatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(PicError::dim(format!(
                "add shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data).ensure_finite("add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::activation(&self.nodes[x.0].value, ops::Activation::Relu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::activation(&self.nodes[x.0].value, ops::Activation::LeakyRelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x), rg)
    }

    fn gather(&mut self, x: NodeId, shape: Vec<usize>, index: Vec<usize>) -> NodeId {
        let value = Tensor::from_parts(shape, ops::gather(self.nodes[x.0].value.data(), &index));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gather { x, index }, rg)
    }

    /// Maximum over the trailing axis; the axis is dropped from the shape.
    pub fn row_max(&mut self, x: NodeId, tie: TieBreak) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(PicError::dim("row_max of an empty tensor"));
        }
        let index = ops::row_argmax(xv, tie);
        let mut shape = xv.shape()[..xv.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.gather(x, shape, index))
    }

    /// Channelwise max over time windows (see [`ops::max_pool_time`]).
    pub fn window_max(&mut self, x: NodeId, kernel: usize, stride: usize, partial: bool) -> Result<NodeId> {
        let (shape, index) =
            ops::window_max_index(&self.nodes[x.0].value, kernel, stride, partial, TieBreak::Lowest)?;
        Ok(self.gather(x, shape, index))
    }

    pub fn pad_time(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        if left == 0 && right == 0 {
            return Ok(x);
        }
        let (shape, index) = ops::pad_time_index(&self.nodes[x.0].value, left, right)?;
        Ok(self.gather(x, shape, index))
    }

    pub fn unfold_time(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (shape, index) = ops::unfold_index(&self.nodes[x.0].value, window)?;
        Ok(self.gather(x, shape, index))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Order-independent mean over each full time window.
    pub fn window_mean(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let value = ops::window_mean_sorted(&self.nodes[x.0].value, window)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::WindowMean { x, window }, rg))
    }

    /// Average over the time axis: `[B, L, C] -> [B, C]`.
    pub fn mean_time(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::mean_time(&self.nodes[x.0].value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanTime(x), rg))
    }

    /// Batch normalization over all leading axes. Returns the output node and,
    /// in train mode, the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: NormMode,
        running: Option<&RunningStats>,
    ) -> Result<(NodeId, Option<RunningStats>)> {
        let fwd = ops::batch_norm_core(
            &self.nodes[x.0].value,
            self.nodes[scale.0].value.data(),
            self.nodes[shift.0].value.data(),
            mode,
            running,
        )?;
        let rg = self.rg(&[x, scale, shift]);
        let id = self.push(
            fwd.out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train: mode == NormMode::Train,
            },
            rg,
        );
        Ok((id, fwd.batch))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Vec<f64>)> {
        let lv = &self.nodes[logits.0].value;
        let k = lv.last_dim();
        let b = lv.rows();
        if labels.len() != b {
            return Err(PicError::Validation(format!("{} labels for {b} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(PicError::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut per_sample = Vec::with_capacity(b);
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            per_sample.push(lse - row[y]);
            ops::softmax_row(row, &mut probs[r * k..(r + 1) * k]);
        }
        let loss = per_sample.iter().sum::<f64>() / b as f64;
        let value = Tensor::scalar(loss).ensure_finite("softmax_cross_entropy")?;
        let rg = self.rg(&[logits]);
        let id = self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        );
        Ok((id, per_sample))
    }

    /// Mean per-class sigmoid binary cross-entropy against multi-hot targets.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, targets: &Tensor) -> Result<(NodeId, Vec<f64>)> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape() != targets.shape() {
            return Err(PicError::Validation(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                lv.shape()
            )));
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(PicError::Validation("multi-hot targets must be 0 or 1".into()));
        }
        let k = lv.last_dim();
        let b = lv.rows();
        let mut per_sample = Vec::with_capacity(b);
        for r in 0..b {
            let s: f64 = lv
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum();
            per_sample.push(s / k as f64);
        }
        let probs = lv.data().iter().map(|&z| ops::sigmoid_scalar(z)).collect();
        let loss = per_sample.iter().sum::<f64>() / b as f64;
        let value = Tensor::scalar(loss).ensure_finite("sigmoid_cross_entropy")?;
        let rg = self.rg(&[logits]);
        let id = self.push(
            value,
            Op::SigmoidCrossEntropy {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        );
        Ok((id, per_sample))
    }

    /// Scalar `Σ weights ⊙ x`; handy for reducing a tensor output to a loss.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() != weights.numel() {
            return Err(PicError::dim("weighted_sum size mismatch"));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(PicError::dim("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b, trans_w } => {
                let (xv, wv) = (val(*x), val(*w));
                let rows = xv.rows();
                let p = xv.last_dim();
                let q = g.last_dim();
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * p];
                    if *trans_w {
                        ops::matmul_into(g.data(), wv.data(), &mut dx, rows, q, p);
                    } else {
                        ops::matmul_nt_into(g.data(), wv.data(), &mut dx, rows, q, p);
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; p * q];
                    if *trans_w {
                        ops::matmul_tn_acc(g.data(), xv.data(), &mut dw, rows, q, p);
                    } else {
                        ops::matmul_tn_acc(xv.data(), g.data(), &mut dw, rows, p, q);
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; q];
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                    }
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (gn, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                let n = g.dim(2);
                if self.needs(*a) {
                    let mut da = vec![0.0; gn * m * k];
                    for gi in 0..gn {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let bs = &bv.data()[gi * k * n..(gi + 1) * k * n];
                        let ds = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            ops::matmul_into(gs, bs, ds, m, n, k);
                        } else {
                            ops::matmul_nt_into(gs, bs, ds, m, n, k);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; gn * k * n];
                    for gi in 0..gn {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let as_ = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let ds = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            ops::matmul_tn_acc(gs, as_, ds, m, n, k);
                        } else {
                            ops::matmul_tn_acc(as_, gs, ds, m, k, n);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::LeakyRelu(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { LEAKY_SLOPE * gv })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Gather { x, index } => {
                if self.needs(*x) {
                    let xv = val(*x);
                    let mut d = vec![0.0; xv.numel()];
                    for (&src, &gv) in index.iter().zip(g.data()) {
                        if src != ZERO_INDEX {
                            d[src] += gv;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
                }
            }
            Op::Reshape(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, g.reshape(xv.shape())?);
            }
            Op::WindowMean { x, window } => {
                let xv = val(*x);
                let (b, l, c) = ops::time_extents(xv, "window mean")?;
                let out_len = l - window + 1;
                let scale = 1.0 / *window as f64;
                let mut d = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for o in 0..out_len {
                        for k in 0..*window {
                            for ch in 0..c {
                                d[bi * l * c + (o + k) * c + ch] += g.data()[bi * out_len * c + o * c + ch] * scale;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::MeanTime(x) => {
                let xv = val(*x);
                let (b, l, c) = ops::time_extents(xv, "mean_time")?;
                let mut d = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for t in 0..l {
                        for ch in 0..c {
                            d[bi * l * c + t * c + ch] = g.data()[bi * c + ch] / l as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let xv = val(*x);
                let c = xv.last_dim();
                let rows = xv.rows();
                let sv = val(*scale).data();
                let gd = g.data();
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        dscale[ch] += gd[i] * xhat[i];
                        dshift[ch] += gd[i];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * c];
                    if *train {
                        let n = rows as f64;
                        for ch in 0..c {
                            let k = sv[ch] * inv_std[ch] / n;
                            for r in 0..rows {
                                let i = r * c + ch;
                                dx[i] = k * (n * gd[i] - dshift[ch] - xhat[i] * dscale[ch]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                dx[r * c + ch] = gd[r * c + ch] * sv[ch] * inv_std[ch];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                self.accumulate(grads, *scale, Tensor::from_parts(vec![c], dscale));
                self.accumulate(grads, *shift, Tensor::from_parts(vec![c], dshift));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let lv = val(*logits);
                let k = lv.last_dim();
                let scale = g.data()[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::SigmoidCrossEntropy { logits, probs, targets } => {
                let lv = val(*logits);
                let scale = g.data()[0] / targets.len() as f64;
                let d = probs.iter().zip(targets).map(|(p, y)| (p - y) * scale).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::WeightedSum { x, weights } => {
                let xv = val(*x);
                let s = g.data()[0];
                let d = weights.iter().map(|w| w * s).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_via_affine() {
        // f(w) = w·w as a 1x1 affine of w with itself.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let y = tape.affine(w, w, None, false).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn row_max_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 4.0, 2.0, 7.0, 7.0, 0.0]).unwrap());
        let m = tape.row_max(s, TieBreak::Lowest).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 7.0]);
        let w = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let out = tape.weighted_sum(m, &w).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(&[2, 1], vec![0.5, -1.0]).unwrap());
        let y = tape.affine(x, w, None, false).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(tape.mac_count(), 2);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
