//! Fast self-check suite run by the `verify` command.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{analytic_macs, analytic_params, instrumented_macs};
use crate::config::{DataConfig, Padding, RunConfig, Variant};
use crate::error::{PicError, Result};
use crate::layers::{
    pic_global_forward, pic_inferred_window, pic_ordered_window, pic_window, same_padding, temporal_conv_window, Layer,
    LayerDims, PicParams,
};
use crate::metrics::mean_average_precision;
use crate::network::{build_cascade, Labels};
use crate::ops::{self, NormMode, TieBreak};
use crate::optim::{self, OptState};
use crate::persist::{model_from_bytes, model_to_bytes};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Negative-control switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Resolve row-max ties to the highest index instead of the lowest.
    pub flip_tie_break: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAIL" };
            writeln!(f, "{status:4} {:<40} {:>8.1} ms  {}", c.name, c.millis, c.detail)?;
        }
        Ok(())
    }
}

type Check = Result<String>;

fn fail(msg: impl Into<String>) -> PicError {
    PicError::Validation(msg.into())
}

fn dims(window: usize) -> LayerDims {
    LayerDims {
        channels: 8,
        bottleneck: 3,
        keys: 5,
        values: 4,
        window,
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let data: Vec<f64> = perm.iter().flat_map(|&r| x.row(r).to_vec()).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn check_row_max(opts: VerifyOptions) -> Check {
    let tie = if opts.flip_tie_break {
        TieBreak::Highest
    } else {
        TieBreak::Lowest
    };
    let s = Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 0.0])?;
    let mut tape = Tape::new();
    let x = tape.leaf(s.clone());
    let m = tape.row_max(x, tie)?;
    if tape.value(m).data() != [3.0, 2.0] {
        return Err(fail(format!("row_max values {:?}", tape.value(m).data())));
    }
    let out = tape.weighted_sum(m, &Tensor::new(&[2], vec![1.0, 1.0])?)?;
    let g = tape.backward(out)?;
    let g = g.get(x).ok_or_else(|| fail("row_max: no gradient"))?;
    for (row, expected) in [(0, 1), (1, 0)] {
        let got = g.row(row).iter().position(|&v| v == 1.0);
        if got != Some(expected) {
            return Err(fail(format!(
                "row_max: tie in row {row} resolved to index {got:?}, expected {expected}"
            )));
        }
    }
    Ok("ties resolve to the lowest index".into())
}

fn check_window_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut count = 0;
    for t in [2, 3, 4, 5, 9] {
        let p = PicParams::init(dims(t), &mut rng);
        let xw = Tensor::randn(&[t, 3], 1.0, &mut rng);
        let y = pic_window(&xw, &p)?;
        let perms = if t <= 5 {
            permutations(t)
        } else {
            (0..100)
                .map(|_| {
                    let mut q: Vec<usize> = (0..t).collect();
                    q.shuffle(&mut rng);
                    q
                })
                .collect()
        };
        for perm in perms {
            worst = worst.max(pic_window(&permute_rows(&xw, &perm), &p)?.max_abs_diff(&y));
            count += 1;
        }
    }
    if worst > 1e-12 {
        return Err(fail(format!("pic_window deviates by {worst:e} under permutation")));
    }
    Ok(format!("{count} permutations, max deviation {worst:e}"))
}

fn check_global_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = PicParams::init(dims(3), &mut rng);
    p.recover_w = Tensor::randn(&[3, 8], 0.5, &mut rng);
    let x = Tensor::randn(&[1, 12, 8], 1.0, &mut rng);
    let y = pic_global_forward(&x, &p)?;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let xp = permute_rows(&x.reshape(&[12, 8])?, &perm).into_reshaped(&[1, 12, 8])?;
        if !pic_global_forward(&xp, &p)?.bitwise_eq(&y) {
            return Err(fail("global layer output changed under a permutation"));
        }
    }
    Ok("bitwise equal under 20 permutations".into())
}

/// Sliding layer output equals evaluating the window function at every
/// position of the padded sequence.
fn check_sliding(variant: Variant) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = 4;
    let mut layer = Layer::init(variant, dims(t), &mut rng);
    for (name, w) in layer.fields_mut() {
        if name == "recover_w" || name.ends_with("_b") || name == "bias" {
            *w = Tensor::randn(w.shape(), 0.5, &mut rng);
        }
    }
    let n = 7;
    let x = Tensor::randn(&[1, n, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape, false);
    let xn = tape.constant(x.clone());
    let out = bound.forward(&mut tape, xn, t, Padding::Same)?;
    let branch = tape.value(out.branch).clone();

    let f = layer.fields();
    let get = |name: &str| f.iter().find(|(n, _)| *n == name).map(|(_, t)| (*t).clone()).unwrap();
    let z = ops::affine(&x, &get("reduce_w"), Some(&get("reduce_b")))?;
    let (left, _) = same_padding(t);
    let mut worst = 0.0f64;
    for o in 0..n {
        let mut rows = Vec::with_capacity(t * 3);
        for k in 0..t {
            let src = (o + k) as isize - left as isize;
            if src < 0 || src >= n as isize {
                rows.extend([0.0; 3]);
            } else {
                rows.extend_from_slice(&z.data()[src as usize * 3..src as usize * 3 + 3]);
            }
        }
        let xw = Tensor::new(&[t, 3], rows)?;
        let y = match &layer {
            Layer::Pic(p) | Layer::PicGlobal(p) => pic_window(&xw, p)?,
            Layer::PicOrdered(p) => pic_ordered_window(&xw, p)?,
            Layer::PicInferred(p) => pic_inferred_window(&xw, p)?,
            Layer::TemporalConv(p) => temporal_conv_window(&xw, p)?,
        };
        let b = ops::affine(&y.reshape(&[1, 3])?, &get("recover_w"), Some(&get("recover_b")))?;
        let expected = Tensor::new(&[8], b.into_data())?;
        let got = Tensor::new(&[8], branch.data()[o * 8..(o + 1) * 8].to_vec())?;
        worst = worst.max(got.max_abs_diff(&expected));
    }
    if worst > 1e-12 {
        return Err(fail(format!("sliding and per-window outputs differ by {worst:e}")));
    }
    Ok(format!("max deviation {worst:e}"))
}

fn tiny_config(variant: Variant, depth: usize) -> RunConfig {
    RunConfig {
        variant,
        depth,
        window: 3,
        keys: 4,
        values: 4,
        channels: 8,
        data: DataConfig {
            num_classes: 3,
            timesteps: 8,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

fn check_gradients(variant: Variant) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut m = build_cascade(&tiny_config(variant, 2))?;
    let vals: Vec<Tensor> = m
        .params()
        .iter()
        .map(|(_, t)| Tensor::randn(t.shape(), 0.5, &mut rng))
        .collect();
    m.set_params(&vals)?;
    let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let report = m.grad_check(&x, &Labels::Single(vec![1, 2]), 1e-5, 1e-4)?;
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(fail(format!("gradient mismatch in {}", names.join(", "))));
    }
    Ok(format!("{} tensors, max rel error {:.2e}", report.params.len(), report.max_error()))
}

fn check_matmul() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
    let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
    let c = ops::matmul(&a, &b)?;
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0;
            for p in 0..7 {
                acc += a.get(&[i, p]) * b.get(&[p, j]);
            }
            if acc.to_bits() != c.get(&[i, j]).to_bits() {
                return Err(fail(format!("matmul differs from triple loop at ({i}, {j})")));
            }
        }
    }
    Ok("bitwise equal to triple loop".into())
}

/// AP from its definition: mean over positives of the fraction of positives
/// among the samples ranked at or above it.
fn brute_force_ap(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| pos[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let ranked: Vec<usize> = (0..scores.len()).filter(|&j| above(i, j)).collect();
            ranked.iter().filter(|&&j| pos[j]).count() as f64 / ranked.len() as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

fn check_map() -> Check {
    let scores = Tensor::new(&[3, 2], vec![0.9, 0.2, 0.4, 0.4, 0.4, 0.7])?;
    let mut tested = 0;
    for pattern in 0u32..64 {
        let labels: Vec<f64> = (0..6).map(|b| f64::from((pattern >> b) & 1)).collect();
        let lt = Tensor::new(&[3, 2], labels.clone())?;
        let aps: Vec<f64> = (0..2)
            .filter_map(|c| {
                let s: Vec<f64> = (0..3).map(|r| scores.get(&[r, c])).collect();
                let p: Vec<bool> = (0..3).map(|r| labels[r * 2 + c] > 0.5).collect();
                brute_force_ap(&s, &p)
            })
            .collect();
        match mean_average_precision(&scores, &lt) {
            Ok(r) => {
                let expected = aps.iter().sum::<f64>() / aps.len() as f64;
                if (r.map - expected).abs() > 1e-12 {
                    return Err(fail(format!("mAP {} != {expected} for pattern {pattern:06b}", r.map)));
                }
                tested += 1;
            }
            Err(_) if aps.is_empty() => {}
            Err(e) => return Err(e),
        }
    }
    Ok(format!("{tested} label patterns"))
}

fn check_counters() -> Check {
    let mut n = 0;
    for v in Variant::ALL {
        for depth in [1, 2] {
            let cfg = tiny_config(v, depth);
            let m = build_cascade(&cfg)?;
            let (a, i) = (analytic_macs(&cfg, 8)?, instrumented_macs(&m, 8)?);
            if a != i {
                return Err(fail(format!("{v} depth {depth}: analytic {a} vs counted {i} MACs")));
            }
            if analytic_params(&cfg) != m.param_count() {
                return Err(fail(format!("{v} depth {depth}: parameter formula mismatch")));
            }
            n += 1;
        }
    }
    Ok(format!("{n} configurations"))
}

fn check_identity_init() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for v in Variant::ALL {
        let m = build_cascade(&tiny_config(v, 2))?;
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[2, 8, 8], 1.0, &mut rng));
        let trace = m.forward_tape(&mut tape, &bound, x, NormMode::Train)?;
        for (i, b) in trace.blocks.iter().enumerate() {
            if tape.value(b.layer.branch).data().iter().any(|&v| v != 0.0) {
                return Err(fail(format!("{v} block {i}: fresh branch is not zero")));
            }
        }
    }
    Ok("zero branch for every variant".into())
}

fn check_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut m = build_cascade(&tiny_config(Variant::PicInferred, 2))?;
    m.calibrate(&Tensor::randn(&[3, 8, 8], 1.0, &mut rng))?;
    let bytes = model_to_bytes(&m);
    if model_to_bytes(&model_from_bytes(&bytes)?) != bytes {
        return Err(fail("model container does not round-trip"));
    }
    let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let step = m.loss_and_grads(&x, &Labels::Single(vec![0, 1]))?;
    let mut state = OptState::new(&m.config.optimizer, &m.params());
    optim::step(&mut m.params_mut(), &step.grads, &mut state)?;
    let sb = state.to_bytes();
    if OptState::from_bytes(&sb)?.to_bytes() != sb {
        return Err(fail("optimizer state does not round-trip"));
    }
    Ok("model and optimizer state bitwise".into())
}

fn check_batch_consistency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut m = build_cascade(&tiny_config(Variant::Pic, 2))?;
    m.calibrate(&Tensor::randn(&[4, 8, 8], 1.0, &mut rng))?;
    let x = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
    let all = m.forward(&x, NormMode::Eval)?;
    for r in 0..8 {
        let one = Tensor::new(&[1, 8, 8], x.data()[r * 64..(r + 1) * 64].to_vec())?;
        let y = m.forward(&one, NormMode::Eval)?;
        if y.data() != all.row(r) {
            return Err(fail(format!("row {r} differs between batch sizes")));
        }
    }
    if !m.forward(&x, NormMode::Eval)?.bitwise_eq(&all) {
        return Err(fail("eval forward is not repeatable"));
    }
    Ok("B=1 rows equal B=8 rows bitwise".into())
}

/// Runs every check; failures are collected, never short-circuited.
pub fn run_verify(opts: VerifyOptions) -> VerifyReport {
    let mut checks: Vec<(String, Box<dyn Fn() -> Check>)> = vec![
        ("row_max tie-break".into(), Box::new(move || check_row_max(opts))),
        ("window permutation invariance".into(), Box::new(check_window_invariance)),
        ("global layer invariance".into(), Box::new(check_global_invariance)),
        ("matmul oracle".into(), Box::new(check_matmul)),
        ("mAP oracle".into(), Box::new(check_map)),
        ("FLOP and parameter counters".into(), Box::new(check_counters)),
        ("identity initialization".into(), Box::new(check_identity_init)),
        ("container round trips".into(), Box::new(check_round_trips)),
        ("eval batch consistency".into(), Box::new(check_batch_consistency)),
    ];
    for v in Variant::ALL {
        if v != Variant::PicGlobal {
            checks.push((format!("sliding window {v}"), Box::new(move || check_sliding(v))));
        }
        checks.push((format!("gradients {v}"), Box::new(move || check_gradients(v))));
    }
    let mut report = VerifyReport::default();
    for (name, f) in checks {
        let start = Instant::now();
        let result = f();
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        report.checks.push(CheckResult {
            name,
            passed,
            detail,
            millis,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let r = run_verify(VerifyOptions::default());
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn flipped_tie_break_is_caught() {
        let r = run_verify(VerifyOptions { flip_tie_break: true });
        let f = r.failures();
        assert_eq!(f.len(), 1, "{r}");
        assert!(f[0].detail.contains("row_max"));
    }

    #[test]
    fn permutation_enumeration() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(brute_force_ap(&[0.9, 0.8, 0.1, 0.0], &[false, true, false, false]), Some(0.5));
    }
}
