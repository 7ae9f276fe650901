//! Permutation-robustness study, efficiency profile and concept retrieval.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Padding, RunConfig, Variant};
use crate::error::{PicError, Result};
use crate::layers::{Layer, LayerDims};
use crate::metrics;
use crate::network::{build_cascade, CascadeModel};
use crate::ops::{self, NormMode};
use crate::persist::FORMAT_VERSION;
use crate::synthdata::{labels_for, permute_all, stack, ActivitySample, ActivityTaxonomy, Protocol};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Metric of `model` on `samples` (eval mode).
pub fn evaluate_samples(
    model: &CascadeModel,
    samples: &[ActivitySample],
    tax: &ActivityTaxonomy,
    threads: usize,
) -> Result<metrics::MetricReport> {
    let x = stack(samples)?;
    let labels = labels_for(samples, model.task(), tax)?;
    let logits = model.predict(&x, threads)?;
    metrics::evaluate(&logits, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolScore {
    pub protocol: Protocol,
    /// Metric per permutation seed.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Unpermuted metric minus `mean`.
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropTable {
    pub metric: &'static str,
    pub baseline: f64,
    pub rows: Vec<ProtocolScore>,
}

impl DropTable {
    pub fn row(&self, p: Protocol) -> Option<&ProtocolScore> {
        self.rows.iter().find(|r| r.protocol == p)
    }

    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut out = format!(
            "# format_version={FORMAT_VERSION} config={}\nprotocol,seed,{}\n",
            cfg.to_canonical_json(),
            self.metric
        );
        for r in &self.rows {
            for (s, v) in &r.per_seed {
                writeln!(out, "{},{s},{v}", r.protocol).unwrap();
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{:<8} {:>10} {:>10}\n", "protocol", self.metric, "drop");
        for r in &self.rows {
            writeln!(out, "{:<8} {:>10.4} {:>10.4}", r.protocol.name(), r.mean, r.drop).unwrap();
        }
        out
    }
}

/// Metric under each protocol averaged over `seeds`, and its drop relative
/// to the unpermuted test set.
pub fn permutation_robustness(
    model: &CascadeModel,
    samples: &[ActivitySample],
    tax: &ActivityTaxonomy,
    protocols: &[Protocol],
    seeds: &[u64],
    threads: usize,
) -> Result<DropTable> {
    if seeds.is_empty() {
        return Err(PicError::config("at least one permutation seed required"));
    }
    let base = evaluate_samples(model, samples, tax, threads)?;
    let mut rows = Vec::with_capacity(protocols.len());
    for &p in protocols {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let v = if p == Protocol::Uniform {
                base.value
            } else {
                evaluate_samples(model, &permute_all(samples, p, s)?, tax, threads)?.value
            };
            per_seed.push((s, v));
        }
        let mean = if p == Protocol::Uniform {
            base.value
        } else {
            per_seed.iter().map(|(_, v)| v).sum::<f64>() / seeds.len() as f64
        };
        rows.push(ProtocolScore {
            protocol: p,
            per_seed,
            mean,
            drop: base.value - mean,
        });
    }
    Ok(DropTable {
        metric: base.metric,
        baseline: base.value,
        rows,
    })
}

/// Multiply-accumulates of one layer on a length-`n` input (batch 1), and
/// its output length.
pub fn layer_macs(variant: Variant, d: LayerDims, padding: Padding, n: usize) -> Result<(u64, usize)> {
    let (c, cb, m, mv) = (d.channels, d.bottleneck, d.keys, d.values);
    let (t, lp, lo) = match (variant, padding) {
        (Variant::PicGlobal, _) => (n, n, 1),
        (_, Padding::Same) => (d.window, n + d.window - 1, n),
        (_, Padding::Valid) => {
            if d.window > n {
                return Err(PicError::config(format!("window {} exceeds length {n}", d.window)));
            }
            (d.window, n, n - d.window + 1)
        }
    };
    let core = match variant {
        Variant::Pic | Variant::PicGlobal => lp * cb * m + lo * m * mv + lo * mv * cb,
        Variant::PicOrdered => lo * t * cb * m + lo * m * cb,
        Variant::PicInferred => 2 * lo * t * cb * cb + lo * t * cb * t + lo * t * t + lo * t * cb,
        Variant::TemporalConv => lo * t * cb * cb,
    };
    Ok(((n * c * cb + core + lo * cb * c) as u64, lo))
}

/// Closed-form forward multiply-accumulates of the whole model for one
/// length-`n` sequence.
pub fn analytic_macs(cfg: &RunConfig, n: usize) -> Result<u64> {
    let dims = CascadeModel::layer_dims(cfg);
    let mut total = 0u64;
    let mut len = n;
    for _ in 0..cfg.depth {
        let (macs, lo) = layer_macs(cfg.variant, dims, cfg.padding, len)?;
        total += macs;
        len = lo.div_ceil(cfg.stride);
    }
    let (c, h, k) = (cfg.channels, cfg.hidden_width(), cfg.num_classes());
    Ok(total + (c * h + h * k) as u64)
}

/// Closed-form parameter count.
pub fn analytic_params(cfg: &RunConfig) -> usize {
    let c = cfg.channels;
    let per_block = Layer::param_count(cfg.variant, CascadeModel::layer_dims(cfg)) + 2 * c;
    let (h, k) = (cfg.hidden_width(), cfg.num_classes());
    cfg.depth * per_block + c * h + h + 2 * h + h * k + k
}

/// Multiply-accumulates counted while running a forward pass on `[1, n, C]`.
pub fn instrumented_macs(model: &CascadeModel, n: usize) -> Result<u64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, n, model.config.channels]));
    model.forward_tape(&mut tape, &bound, x, NormMode::Train)?;
    Ok(tape.mac_count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub variant: Variant,
    pub depth: usize,
    pub params: usize,
    /// Analytic forward FLOPs (2 per multiply-accumulate).
    pub flops: u64,
    pub instrumented_flops: u64,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    pub timesteps: usize,
    pub repeats: usize,
    pub rows: Vec<ProfileRow>,
}

impl EfficiencyReport {
    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut out = format!(
            "# format_version={FORMAT_VERSION} config={}\nvariant,depth,params,flops,instrumented_flops,median_ms\n",
            cfg.to_canonical_json()
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.4}",
                r.variant, r.depth, r.params, r.flops, r.instrumented_flops, r.median_ms
            )
            .unwrap();
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Counts and single-sample eval timings for each variant and depth.
///
/// Timing is the median of `repeats` forward passes after 3 warm-ups; pass
/// `repeats = 0` to skip timing.
pub fn profile(cfg: &RunConfig, variants: &[Variant], depths: &[usize], repeats: usize) -> Result<EfficiencyReport> {
    let n = cfg.data.timesteps;
    let mut rows = Vec::new();
    for &variant in variants {
        for &depth in depths {
            let c = RunConfig {
                variant,
                depth,
                ..cfg.clone()
            };
            let mut model = build_cascade(&c)?;
            let flops = 2 * analytic_macs(&c, n)?;
            let instrumented_flops = 2 * instrumented_macs(&model, n)?;
            let median_ms = if repeats == 0 {
                f64::NAN
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
                model.calibrate(&Tensor::randn(&[4, n, c.channels], 1.0, &mut rng))?;
                let x = Tensor::randn(&[1, n, c.channels], 1.0, &mut rng);
                for _ in 0..3 {
                    model.forward(&x, NormMode::Eval)?;
                }
                let mut times: Vec<f64> = (0..repeats)
                    .map(|_| {
                        let start = Instant::now();
                        model.forward(&x, NormMode::Eval).map(|_| start.elapsed().as_secs_f64() * 1e3)
                    })
                    .collect::<Result<_>>()?;
                median(&mut times)
            };
            rows.push(ProfileRow {
                variant,
                depth,
                params: analytic_params(&c),
                flops,
                instrumented_flops,
                median_ms,
            });
        }
    }
    Ok(EfficiencyReport {
        timesteps: n,
        repeats,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub sample: usize,
    pub timestep: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    /// Per key, hits sorted by descending similarity.
    pub hits: Vec<Vec<Hit>>,
    /// Set when fewer than `k` timesteps were available.
    pub truncated: bool,
}

/// For every key of block `layer`, the `k` timesteps across `samples` whose
/// reduced features score highest against it. Ties keep (sample, timestep)
/// order.
pub fn concept_retrieval(model: &CascadeModel, samples: &[ActivitySample], layer: usize, k: usize) -> Result<Retrieval> {
    let block = model
        .blocks
        .get(layer)
        .ok_or_else(|| PicError::config(format!("model has no block {layer}")))?;
    let p = match &block.layer {
        Layer::Pic(p) | Layer::PicGlobal(p) => p,
        other => {
            return Err(PicError::config(format!(
                "block {layer} is {}, which has no shared keys",
                other.variant()
            )))
        }
    };
    let x = stack(samples)?;
    let input = if layer == 0 {
        x
    } else {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xn = tape.constant(x);
        let trace = model.forward_tape(&mut tape, &bound, xn, NormMode::Eval)?;
        tape.value(trace.blocks[layer].input).clone()
    };
    let z = ops::affine(&input, &p.reduce_w, Some(&p.reduce_b))?;
    let s = ops::affine(&z, &p.keys.transpose()?, None)?;
    let (b, l, m) = (s.dim(0), s.dim(1), s.dim(2));
    let mut hits = Vec::with_capacity(m);
    for key in 0..m {
        let mut all: Vec<Hit> = Vec::with_capacity(b * l);
        for sample in 0..b {
            for timestep in 0..l {
                all.push(Hit {
                    sample,
                    timestep,
                    similarity: s.get(&[sample, timestep, key]),
                });
            }
        }
        all.sort_by(|a, c| c.similarity.total_cmp(&a.similarity));
        all.truncate(k);
        hits.push(all);
    }
    Ok(Retrieval {
        hits,
        truncated: k > b * l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn small(variant: Variant, depth: usize) -> RunConfig {
        RunConfig {
            variant,
            depth,
            window: 3,
            keys: 4,
            values: 5,
            channels: 8,
            data: DataConfig {
                timesteps: 16,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn analytic_counts_match_instrumented() {
        for v in Variant::ALL {
            for depth in [1, 2] {
                for padding in [Padding::Same, Padding::Valid] {
                    let c = RunConfig { padding, ..small(v, depth) };
                    let m = build_cascade(&c).unwrap();
                    assert_eq!(analytic_macs(&c, 16).unwrap(), instrumented_macs(&m, 16).unwrap(), "{v} {depth}");
                    assert_eq!(analytic_params(&c), m.param_count(), "{v} {depth}");
                }
            }
        }
    }

    #[test]
    fn params_affine_in_depth() {
        for v in Variant::ALL {
            let p: Vec<usize> = (0..5).map(|d| analytic_params(&small(v, d))).collect();
            let step = p[1] - p[0];
            assert!(p.windows(2).all(|w| w[1] - w[0] == step));
        }
    }

    #[test]
    fn layer_flops_linear_in_length() {
        for v in [Variant::Pic, Variant::PicOrdered, Variant::PicInferred, Variant::TemporalConv] {
            let dims = CascadeModel::layer_dims(&small(v, 1));
            let cost = |n| layer_macs(v, dims, Padding::Same, n).unwrap().0;
            assert_eq!(cost(32) - cost(16), cost(48) - cost(32), "{v}");
            if v == Variant::Pic {
                // Similarities of the T-1 padding rows are the only offset.
                assert_eq!(2 * cost(16) - cost(32), (2 * 2 * 4) as u64);
            } else {
                assert_eq!(cost(32), 2 * cost(16), "{v}");
            }
        }
    }

    #[test]
    fn retrieval_orders_and_truncates() {
        let c = small(Variant::Pic, 1);
        let mut m = build_cascade(&c).unwrap();
        let Layer::Pic(p) = &mut m.blocks[0].layer else { unreachable!() };
        p.keys = Tensor::zeros(&[4, 2]);
        let samples: Vec<ActivitySample> = (0..2)
            .map(|i| ActivitySample {
                x: Tensor::full(&[3, 8], i as f64),
                class: 0,
                boundaries: vec![0, 3],
                actions: vec![0; 3],
            })
            .collect();
        let r = concept_retrieval(&m, &samples, 0, 10).unwrap();
        assert!(r.truncated);
        let order: Vec<(usize, usize)> = r.hits[0].iter().map(|h| (h.sample, h.timestep)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert!(r.hits[0].iter().all(|h| h.similarity == 0.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
