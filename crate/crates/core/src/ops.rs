//! Value-level numeric primitives.
//!
//! Every function here is pure and deterministic. Reductions accumulate in
//! index order so results are reproducible bit for bit. The differentiable
//! counterparts in [`crate::tape`] reuse these forward kernels.

use crate::error::{PicError, Result};
use crate::tensor::Tensor;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Variance floor added inside batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Sentinel index that gathers an implicit zero.
pub(crate) const ZERO_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Softmax,
}

/// Which index wins when several entries of a row share the maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    Lowest,
    Highest,
}

impl TieBreak {
    #[inline]
    fn prefer(self, candidate: f64, best: f64) -> bool {
        match self {
            TieBreak::Lowest => candidate > best,
            TieBreak::Highest => candidate >= best,
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(PicError::dim(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[i][j] = dot(a[i], b[j])` with `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[p][j] += Σ_i a[i][p] · b[i][j]` with `a: m×k`, `b: m×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(PicError::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

/// Batched product over a shared leading axis, optionally transposing `b`.
///
/// `a: G×m×k`, `b: G×k×n` (or `G×n×k` when `trans_b`).
pub fn batched_matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    expect_rank(a, 3, "batched_matmul lhs")?;
    expect_rank(b, 3, "batched_matmul rhs")?;
    let (g, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    let (g2, n, k2) = if trans_b {
        (b.dim(0), b.dim(1), b.dim(2))
    } else {
        (b.dim(0), b.dim(2), b.dim(1))
    };
    if g != g2 || k != k2 {
        return Err(PicError::dim(format!(
            "batched_matmul shapes disagree: {:?} x {:?} (trans_b={trans_b})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        let asl = &a.data()[gi * m * k..(gi + 1) * m * k];
        let bsl = &b.data()[gi * k * n..(gi + 1) * k * n];
        let osl = &mut out[gi * m * n..(gi + 1) * m * n];
        if trans_b {
            matmul_nt_into(asl, bsl, osl, m, k, n);
        } else {
            matmul_into(asl, bsl, osl, m, k, n);
        }
    }
    Tensor::from_parts(vec![g, m, n], out).ensure_finite("batched_matmul")
}

/// Similarity of every key with every timestep: `s[m][t] = dot(K[m], Xw[t])`.
pub fn outer_similarity(keys: &Tensor, window: &Tensor) -> Result<Tensor> {
    expect_rank(keys, 2, "outer_similarity keys")?;
    expect_rank(window, 2, "outer_similarity window")?;
    let (m, c) = (keys.dim(0), keys.dim(1));
    let (t, c2) = (window.dim(0), window.dim(1));
    if c != c2 {
        return Err(PicError::dim(format!(
            "keys have {c} channels but window has {c2}"
        )));
    }
    let mut out = vec![0.0; m * t];
    matmul_nt_into(keys.data(), window.data(), &mut out, m, c, t);
    Tensor::from_parts(vec![m, t], out).ensure_finite("outer_similarity")
}

/// Flat argmax positions of each row of a tensor viewed as `[rows, last_dim]`.
pub(crate) fn row_argmax(s: &Tensor, tie: TieBreak) -> Vec<usize> {
    let w = s.last_dim();
    (0..s.rows())
        .map(|r| {
            let row = s.row(r);
            let mut best = 0;
            for (t, &v) in row.iter().enumerate().skip(1) {
                if tie.prefer(v, row[best]) {
                    best = t;
                }
            }
            r * w + best
        })
        .collect()
}

/// Maximum over the trailing axis with the column that attains it.
///
/// Ties go to the lowest column index.
pub fn row_max(s: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    row_max_with(s, TieBreak::Lowest)
}

pub fn row_max_with(s: &Tensor, tie: TieBreak) -> Result<(Tensor, Vec<usize>)> {
    if s.ndim() < 1 || s.numel() == 0 {
        return Err(PicError::dim("row_max of an empty tensor"));
    }
    let w = s.last_dim();
    let flat = row_argmax(s, tie);
    let values = flat.iter().map(|&i| s.data()[i]).collect();
    let mut shape = s.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    let cols = flat.iter().map(|&i| i % w).collect();
    Ok((Tensor::from_parts(shape, values), cols))
}

/// Dense layer `x·W + b` broadcast over all leading axes of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(w, 2, "affine weight")?;
    let (p, q) = (w.dim(0), w.dim(1));
    if x.last_dim() != p {
        return Err(PicError::dim(format!(
            "affine input trailing dim {} does not match weight {:?}",
            x.last_dim(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.numel() != q {
            return Err(PicError::dim(format!(
                "affine bias has {} elements, expected {q}",
                b.numel()
            )));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * q];
    matmul_into(x.data(), w.data(), &mut out, rows, p, q);
    if let Some(b) = b {
        for row in out.chunks_mut(q) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = q;
    Tensor::from_parts(shape, out).ensure_finite("affine")
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Elementwise rectifiers and sigmoid; softmax runs over the trailing axis.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::LeakyRelu => x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Softmax => {
            let w = x.last_dim();
            let mut out = vec![0.0; x.numel()];
            for (r, o) in out.chunks_mut(w).enumerate() {
                softmax_row(x.row(r), o);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
    }
}

/// Splits a `[.., L, C]` tensor into `(batch, L, C)` extents.
pub(crate) fn time_extents(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match x.ndim() {
        2 => Ok((1, x.dim(0), x.dim(1))),
        3 => Ok((x.dim(0), x.dim(1), x.dim(2))),
        _ => Err(PicError::dim(format!(
            "{what}: expected [N, C] or [B, N, C], got {:?}",
            x.shape()
        ))),
    }
}

fn with_time(x: &Tensor, len: usize, channels: usize) -> Vec<usize> {
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = len;
    shape[r - 1] = channels;
    shape
}

pub(crate) fn gather(x: &[f64], index: &[usize]) -> Vec<f64> {
    index
        .iter()
        .map(|&i| if i == ZERO_INDEX { 0.0 } else { x[i] })
        .collect()
}

/// Channelwise max over time windows of `kernel` steps taken every `stride`.
///
/// With `partial` the trailing window may be shorter and the output has
/// `ceil(L / stride)` steps; otherwise only full windows are taken.
pub(crate) fn window_max_index(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    partial: bool,
    tie: TieBreak,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, l, c) = time_extents(x, "window max")?;
    if kernel == 0 || stride == 0 {
        return Err(PicError::config("window and stride must be at least 1"));
    }
    let out_len = if partial {
        l.div_ceil(stride)
    } else {
        if kernel > l {
            return Err(PicError::dim(format!("window {kernel} longer than sequence {l}")));
        }
        (l - kernel) / stride + 1
    };
    let data = x.data();
    let mut index = Vec::with_capacity(b * out_len * c);
    for bi in 0..b {
        let base = bi * l * c;
        for o in 0..out_len {
            let start = o * stride;
            let end = (start + kernel).min(l);
            for ch in 0..c {
                let mut best = start;
                for t in start + 1..end {
                    if tie.prefer(data[base + t * c + ch], data[base + best * c + ch]) {
                        best = t;
                    }
                }
                index.push(base + best * c + ch);
            }
        }
    }
    Ok((with_time(x, out_len, c), index))
}

/// Non-overlapping temporal max pooling; the last window may be shorter.
pub fn max_pool_time(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (shape, index) = window_max_index(x, stride, stride, true, TieBreak::Lowest)?;
    Ok(Tensor::from_parts(shape, gather(x.data(), &index)))
}

/// Index map that zero-pads the time axis by `left`/`right` steps.
pub(crate) fn pad_time_index(x: &Tensor, left: usize, right: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, l, c) = time_extents(x, "pad_time")?;
    let lp = l + left + right;
    let mut index = Vec::with_capacity(b * lp * c);
    for bi in 0..b {
        for t in 0..lp {
            for ch in 0..c {
                if t < left || t >= left + l {
                    index.push(ZERO_INDEX);
                } else {
                    index.push(bi * l * c + (t - left) * c + ch);
                }
            }
        }
    }
    Ok((with_time(x, lp, c), index))
}

/// Index map that stacks every length-`window` slice of the time axis into
/// one row of `window·C` features (time-major).
pub(crate) fn unfold_index(x: &Tensor, window: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, l, c) = time_extents(x, "unfold")?;
    if window == 0 || window > l {
        return Err(PicError::dim(format!("cannot unfold length {l} by window {window}")));
    }
    let out_len = l - window + 1;
    let mut index = Vec::with_capacity(b * out_len * window * c);
    for bi in 0..b {
        for o in 0..out_len {
            for t in o..o + window {
                for ch in 0..c {
                    index.push(bi * l * c + t * c + ch);
                }
            }
        }
    }
    Ok((with_time(x, out_len, window * c), index))
}

/// Mean of each full length-`window` slice of the time axis, summed in
/// ascending value order so the result does not depend on the order of
/// timesteps inside the window.
pub(crate) fn window_mean_sorted(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, l, c) = time_extents(x, "window mean")?;
    if window == 0 || window > l {
        return Err(PicError::dim(format!("cannot average length {l} by window {window}")));
    }
    let out_len = l - window + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(b * out_len * c);
    let mut buf = vec![0.0; window];
    for bi in 0..b {
        for o in 0..out_len {
            for ch in 0..c {
                for (k, slot) in buf.iter_mut().enumerate() {
                    *slot = data[bi * l * c + (o + k) * c + ch];
                }
                buf.sort_by(f64::total_cmp);
                let s: f64 = buf.iter().sum();
                out.push(s / window as f64);
            }
        }
    }
    Ok(Tensor::from_parts(with_time(x, out_len, c), out))
}

/// Mean over the time axis of a `[B, L, C]` tensor, giving `[B, C]`.
pub(crate) fn mean_time(x: &Tensor) -> Result<Tensor> {
    let (b, l, c) = time_extents(x, "mean_time")?;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        let o = &mut out[bi * c..(bi + 1) * c];
        for t in 0..l {
            for (ov, &v) in o.iter_mut().zip(&x.data()[bi * l * c + t * c..bi * l * c + (t + 1) * c]) {
                *ov += v;
            }
        }
        for ov in o.iter_mut() {
            *ov /= l as f64;
        }
    }
    Ok(Tensor::from_parts(vec![b, c], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel batch normalization state: learnable scale and shift plus
/// running statistics populated by train-mode passes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running: Option<RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Blends in one batch's statistics.
    pub fn update(current: Option<&RunningStats>, batch: &RunningStats) -> RunningStats {
        match current {
            None => batch.clone(),
            Some(cur) => RunningStats {
                mean: blend(&cur.mean, &batch.mean),
                var: blend(&cur.var, &batch.var),
            },
        }
    }
}

fn blend(old: &[f64], new: &[f64]) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(o, n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
        .collect()
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running: None,
        }
    }
}

/// Output of [`batch_norm_core`].
pub(crate) struct NormForward {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch: Option<RunningStats>,
}

/// Normalizes every channel of `x: [.., C]` over all leading axes.
///
/// In train mode batch statistics (biased variance) are used and returned;
/// in eval mode the supplied running statistics are used.
pub(crate) fn batch_norm_core(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    mode: NormMode,
    running: Option<&RunningStats>,
) -> Result<NormForward> {
    let c = x.last_dim();
    if scale.len() != c || shift.len() != c {
        return Err(PicError::dim(format!(
            "batch norm has {} channels, input has {c}",
            scale.len()
        )));
    }
    let rows = x.rows();
    let data = x.data();
    let (mean, var, batch) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(&data[r * c..(r + 1) * c]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in 0..rows {
                for ((s, &v), &m) in var.iter_mut().zip(&data[r * c..(r + 1) * c]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let stats = RunningStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval => {
            let rs = running.ok_or(PicError::UninitializedStats)?;
            (rs.mean.clone(), rs.var.clone(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for ch in 0..c {
            let i = r * c + ch;
            let h = (data[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = h * scale[ch] + shift[ch];
        }
    }
    Ok(NormForward {
        out: Tensor::from_parts(x.shape().to_vec(), out).ensure_finite("batch_norm")?,
        xhat,
        inv_std,
        batch,
    })
}

/// Batch normalization over batch and time axes of `x: [B, N, C]`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; eval mode requires running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, mode: NormMode) -> Result<Tensor> {
    let fwd = batch_norm_core(x, state.scale.data(), state.shift.data(), mode, state.running.as_ref())?;
    if let Some(batch) = fwd.batch {
        state.running = Some(RunningStats::update(state.running.as_ref(), &batch));
    }
    Ok(fwd.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_hand_cases() {
        let id = Tensor::identity(2);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&id, &col).unwrap(), col);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &col).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().bitwise_eq(&naive_matmul(&a, &b)));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, PicError::Dimension(_)));
    }

    #[test]
    fn outer_similarity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xw = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let s = outer_similarity(&Tensor::identity(3), &xw).unwrap();
        for m in 0..3 {
            for tt in 0..5 {
                assert_eq!(s.get(&[m, tt]), xw.get(&[tt, m]));
            }
        }
        let z = outer_similarity(&Tensor::zeros(&[4, 3]), &xw).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let k = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let xw = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let oracle = naive_matmul(&k, &xw.transpose().unwrap());
        assert!(outer_similarity(&k, &xw).unwrap().bitwise_eq(&oracle));
        assert!(outer_similarity(&k, &Tensor::zeros(&[5, 5])).is_err());
    }

    #[test]
    fn row_max_cases() {
        let (v, arg) = row_max(&t(&[1, 3], &[1.0, 3.0, 2.0])).unwrap();
        assert_eq!((v.data(), arg.as_slice()), (&[3.0][..], &[1usize][..]));
        let (v, arg) = row_max(&t(&[1, 3], &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!((v.data(), arg.as_slice()), (&[5.0][..], &[0usize][..]));
        let (_, arg) = row_max_with(&t(&[1, 3], &[5.0, 5.0, 5.0]), TieBreak::Highest).unwrap();
        assert_eq!(arg, vec![2]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Tensor::randn(&[6, 9], 1.0, &mut rng);
        let (v, arg) = row_max(&s).unwrap();
        assert_eq!(v.shape(), &[6, 1]);
        for m in 0..6 {
            let mut best = 0;
            for j in 0..9 {
                if s.get(&[m, j]) > s.get(&[m, best]) {
                    best = j;
                }
            }
            assert_eq!(arg[m], best);
            assert_eq!(v.data()[m], s.get(&[m, best]));
        }
    }

    #[test]
    fn affine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = affine(&x, &Tensor::identity(4), Some(&Tensor::zeros(&[4]))).unwrap();
        assert!(y.bitwise_eq(&x));
        let y = affine(&t(&[2], &[1.0, 1.0]), &t(&[2, 1], &[1.0, 1.0]), Some(&t(&[1], &[1.0]))).unwrap();
        assert_eq!(y.data(), &[3.0]);

        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let mut oracle = naive_matmul(&x, &w);
        for i in 0..6 {
            for j in 0..3 {
                let v = oracle.get(&[i, j]) + b.data()[j];
                oracle.set(&[i, j], v);
            }
        }
        assert!(affine(&x, &w, Some(&b)).unwrap().bitwise_eq(&oracle));
        assert!(affine(&x, &Tensor::zeros(&[3, 3]), None).is_err());
    }

    #[test]
    fn activation_cases() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let sm = activation(&t(&[1, 2], &[0.0, 0.0]), Activation::Softmax);
        assert_eq!(sm.data(), &[0.5, 0.5]);
        let lr = activation(&t(&[1], &[-10.0]), Activation::LeakyRelu);
        assert!((lr.data()[0] + 0.1).abs() < 1e-15);
        let sg = activation(&t(&[3], &[-700.0, 0.0, 20.0]), Activation::Sigmoid);
        assert!(sg.data()[0] > 0.0 && sg.data()[2] < 1.0 && sg.data()[1] == 0.5);
    }

    #[test]
    fn max_pool_cases() {
        let x = t(&[4, 1], &[1.0, 5.0, 2.0, 3.0]);
        assert_eq!(max_pool_time(&x, 2).unwrap().data(), &[5.0, 3.0]);
        assert_eq!(max_pool_time(&x, 1).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let y = max_pool_time(&x, 2).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        for o in 0..3 {
            for c in 0..3 {
                let oracle = (o * 2..(o * 2 + 2).min(5))
                    .map(|t| x.get(&[t, c]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.get(&[o, c]), oracle);
            }
        }
    }

    #[test]
    fn batch_norm_cases() {
        let mut st = BatchNormState::new(2);
        st.shift = t(&[2], &[0.3, -0.7]);
        let x = Tensor::full(&[2, 3, 2], 4.0);
        let y = batch_norm(&x, &mut st, NormMode::Train).unwrap();
        for r in 0..6 {
            assert_eq!(y.row(r), &[0.3, -0.7]);
        }

        let mut fresh = BatchNormState::new(2);
        assert!(matches!(
            batch_norm(&x, &mut fresh, NormMode::Eval),
            Err(PicError::UninitializedStats)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 5, 3], 10.0, &mut rng);
        let mut st = BatchNormState::new(3);
        let y = batch_norm(&x, &mut st, NormMode::Train).unwrap();
        let moments = |y: &Tensor, ch: usize| {
            let vals: Vec<f64> = (0..20).map(|r| y.row(r)[ch]).collect();
            let mean = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            (mean, var)
        };
        for ch in 0..3 {
            let (mean, var) = moments(&y, ch);
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert!(st.running.is_some());

        // Exactly standardized input is reproduced up to the epsilon shrink.
        let mut z = Tensor::zeros(&[20, 3]);
        for ch in 0..3 {
            let (mean, var) = moments(&y, ch);
            for r in 0..20 {
                z.set(&[r, ch], (y.row(r)[ch] - mean) / var.sqrt());
            }
        }
        let out = batch_norm(&z, &mut BatchNormState::new(3), NormMode::Train).unwrap();
        let shrink = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - i * shrink).abs() < 1e-9);
            assert!((o - i).abs() < 1e-4);
        }
    }
}
