//! Synthetic long-range activities.
//!
//! A class is an ordered list of segments; a segment is an unordered set of
//! unit-actions. A video gives each segment a contiguous, near-equal share of
//! the timesteps and fills it with the segment's actions in random order with
//! random repetition. Features are a fixed embedding of the action plus
//! Gaussian noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, Task};
use crate::error::{PicError, Result};
use crate::network::Labels;
use crate::persist::{self, DATASET_MAGIC, FORMAT_VERSION};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityTaxonomy {
    /// `classes[k][s]` lists the unit-actions of segment `s` of class `k`.
    pub classes: Vec<Vec<Vec<usize>>>,
    /// Unit-action embeddings `[U, C]`.
    pub embedding: Tensor,
}

impl ActivityTaxonomy {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn vocabulary(&self) -> usize {
        self.embedding.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.embedding.dim(1)
    }

    /// Multi-hot vector over unit-actions occurring in `class`.
    pub fn multi_hot(&self, class: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary()];
        for seg in &self.classes[class] {
            for &a in seg {
                v[a] = 1.0;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivitySample {
    /// Features `[N, C]`.
    pub x: Tensor,
    pub class: usize,
    /// Segment start offsets followed by `N`.
    pub boundaries: Vec<usize>,
    /// Unit-action shown at each timestep.
    pub actions: Vec<usize>,
}

/// Test-time reordering of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Original order.
    Uniform,
    /// Segment blocks shuffled, order within blocks kept.
    Coarse,
    /// Timesteps shuffled within each segment, block order kept.
    Fine,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Uniform, Protocol::Coarse, Protocol::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Uniform => "uniform",
            Protocol::Coarse => "coarse",
            Protocol::Fine => "fine",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = PicError;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PicError::config(format!("unknown protocol `{s}`")))
    }
}

fn embedding_table(rng: &mut ChaCha8Rng, u: usize, c: usize) -> Tensor {
    Tensor::randn(&[u, c], 1.0, rng)
}

/// Classes with disjoint segments drawn without replacement from a shuffled
/// vocabulary.
pub fn make_taxonomy(
    seed: u64,
    num_classes: usize,
    segments_per_class: usize,
    actions_per_segment: usize,
    vocabulary: usize,
    channels: usize,
) -> Result<ActivityTaxonomy> {
    let needed = num_classes * segments_per_class * actions_per_segment;
    if needed == 0 || channels == 0 {
        return Err(PicError::config("taxonomy sizes must be positive"));
    }
    if vocabulary < needed {
        return Err(PicError::config(format!(
            "vocabulary {vocabulary} too small, need at least {needed} unit-actions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = embedding_table(&mut rng, vocabulary, channels);
    let mut ids: Vec<usize> = (0..vocabulary).collect();
    ids.shuffle(&mut rng);
    let mut it = ids.into_iter();
    let classes = (0..num_classes)
        .map(|_| {
            (0..segments_per_class)
                .map(|_| {
                    let mut seg: Vec<usize> = it.by_ref().take(actions_per_segment).collect();
                    seg.sort_unstable();
                    seg
                })
                .collect()
        })
        .collect();
    Ok(ActivityTaxonomy { classes, embedding })
}

/// Classes that are distinct orderings of segments drawn from a shared pool,
/// so only the macro order separates them. An ordering and its reversal are
/// never both used.
pub fn make_pooled_taxonomy(cfg: &DataConfig, channels: usize, pool: usize) -> Result<ActivityTaxonomy> {
    let (s, a) = (cfg.segments_per_class, cfg.actions_per_segment);
    if pool < s {
        return Err(PicError::config(format!("segment pool {pool} smaller than {s} segments per class")));
    }
    if cfg.vocabulary < pool * a {
        return Err(PicError::config(format!(
            "vocabulary {} too small for {pool} segments of {a} actions",
            cfg.vocabulary
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embedding = embedding_table(&mut rng, cfg.vocabulary, channels);
    let mut ids: Vec<usize> = (0..cfg.vocabulary).collect();
    ids.shuffle(&mut rng);
    let segments: Vec<Vec<usize>> = ids
        .chunks(a)
        .take(pool)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v
        })
        .collect();
    // Rejection sampling over orderings; bounded so tiny pools fail loudly.
    let mut orders: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    while orders.len() < cfg.num_classes {
        attempts += 1;
        if attempts > 10_000 + 100 * cfg.num_classes {
            return Err(PicError::config(format!(
                "cannot draw {} distinct segment orderings from a pool of {pool}",
                cfg.num_classes
            )));
        }
        let mut perm: Vec<usize> = (0..pool).collect();
        perm.shuffle(&mut rng);
        perm.truncate(s);
        let rev: Vec<usize> = perm.iter().rev().copied().collect();
        if !orders.contains(&perm) && !orders.contains(&rev) {
            orders.push(perm);
        }
    }
    let classes = orders
        .into_iter()
        .map(|o| o.into_iter().map(|i| segments[i].clone()).collect())
        .collect();
    Ok(ActivityTaxonomy { classes, embedding })
}

/// Taxonomy described by a data config.
pub fn taxonomy_for(cfg: &DataConfig, channels: usize) -> Result<ActivityTaxonomy> {
    match cfg.segment_pool {
        None => make_taxonomy(
            cfg.seed,
            cfg.num_classes,
            cfg.segments_per_class,
            cfg.actions_per_segment,
            cfg.vocabulary,
            channels,
        ),
        Some(pool) => make_pooled_taxonomy(cfg, channels, pool),
    }
}

/// Near-equal split of `n` steps into `parts`, remainder to earlier parts.
/// Returns start offsets followed by `n`.
pub fn segment_bounds(n: usize, parts: usize) -> Vec<usize> {
    let (base, extra) = (n / parts, n % parts);
    let mut out = vec![0];
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(out[i] + len);
    }
    out
}

/// Action sequence of length `len` over `set`: every action at least once,
/// no run longer than `repeat_max`, otherwise uniform choices.
fn fill_segment<R: Rng + ?Sized>(set: &[usize], len: usize, repeat_max: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut unseen = set.len();
    let mut out: Vec<usize> = Vec::with_capacity(len);
    let mut run = 0;
    let mut candidates = Vec::with_capacity(set.len());
    for pos in 0..len {
        let remaining = len - pos;
        let last = out.last().copied();
        candidates.clear();
        for i in 0..set.len() {
            let capped = last == Some(i) && run >= repeat_max;
            let forced = remaining == unseen && seen[i];
            if !capped && !forced {
                candidates.push(i);
            }
        }
        if candidates.is_empty() {
            return Err(PicError::config(format!(
                "cannot fill {len} steps from {} actions with runs of at most {repeat_max}",
                set.len()
            )));
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        run = if last == Some(pick) { run + 1 } else { 1 };
        if !seen[pick] {
            seen[pick] = true;
            unseen -= 1;
        }
        out.push(pick);
    }
    Ok(out.into_iter().map(|i| set[i]).collect())
}

/// Draws one video of `class`.
pub fn sample_video<R: Rng + ?Sized>(
    tax: &ActivityTaxonomy,
    class: usize,
    n: usize,
    noise_sigma: f64,
    repeat_max: usize,
    rng: &mut R,
) -> Result<ActivitySample> {
    let segs = tax
        .classes
        .get(class)
        .ok_or_else(|| PicError::Validation(format!("class {class} out of range")))?;
    let bounds = segment_bounds(n, segs.len());
    if let Some((s, set)) = segs
        .iter()
        .enumerate()
        .find(|(s, set)| bounds[s + 1] - bounds[*s] < set.len())
    {
        return Err(PicError::config(format!(
            "{n} timesteps leave segment {s} fewer than {} slots",
            set.len()
        )));
    }
    let mut actions = Vec::with_capacity(n);
    for (s, set) in segs.iter().enumerate() {
        actions.extend(fill_segment(set, bounds[s + 1] - bounds[s], repeat_max, rng)?);
    }
    let c = tax.channels();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| PicError::config(format!("noise: {e}")))?;
    let mut data = Vec::with_capacity(n * c);
    for &a in &actions {
        for &e in tax.embedding.row(a) {
            data.push(if noise_sigma > 0.0 { e + noise.sample(rng) } else { e });
        }
    }
    Ok(ActivitySample {
        x: Tensor::new(&[n, c], data)?,
        class,
        boundaries: bounds,
        actions,
    })
}

/// Applies a test-time protocol. Labels never change.
pub fn permute_protocol<R: Rng + ?Sized>(sample: &ActivitySample, protocol: Protocol, rng: &mut R) -> Result<ActivitySample> {
    let b = &sample.boundaries;
    let n = sample.actions.len();
    if b.len() < 2 || b[0] != 0 || *b.last().unwrap() != n || b.windows(2).any(|w| w[0] > w[1]) {
        return Err(PicError::Validation("segment boundaries do not partition the video".into()));
    }
    let order: Vec<usize> = match protocol {
        Protocol::Uniform => return Ok(sample.clone()),
        Protocol::Coarse => {
            let mut blocks: Vec<usize> = (0..b.len() - 1).collect();
            blocks.shuffle(rng);
            blocks.into_iter().flat_map(|s| b[s]..b[s + 1]).collect()
        }
        Protocol::Fine => {
            let mut out = Vec::with_capacity(n);
            for w in b.windows(2) {
                let mut idx: Vec<usize> = (w[0]..w[1]).collect();
                idx.shuffle(rng);
                out.extend(idx);
            }
            out
        }
    };
    let boundaries = match protocol {
        Protocol::Coarse => {
            let mut nb = vec![0];
            let mut pos = 0;
            let mut t = 0;
            while t < n {
                let s = b.windows(2).position(|w| w[0] <= order[t] && order[t] < w[1]).unwrap();
                let len = b[s + 1] - b[s];
                pos += len;
                nb.push(pos);
                t += len;
            }
            nb
        }
        _ => b.clone(),
    };
    let c = sample.x.dim(1);
    let mut data = Vec::with_capacity(n * c);
    for &t in &order {
        data.extend_from_slice(sample.x.row(t));
    }
    Ok(ActivitySample {
        x: Tensor::new(&[n, c], data)?,
        class: sample.class,
        boundaries,
        actions: order.iter().map(|&t| sample.actions[t]).collect(),
    })
}

/// Independent random stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Applies a protocol to every sample with per-sample streams of `seed`.
pub fn permute_all(samples: &[ActivitySample], protocol: Protocol, seed: u64) -> Result<Vec<ActivitySample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| permute_protocol(s, protocol, &mut stream_rng(seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub taxonomy: ActivityTaxonomy,
    pub train: Vec<ActivitySample>,
    pub test: Vec<ActivitySample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    data: DataConfig,
    channels: usize,
    classes: Vec<Vec<Vec<usize>>>,
    train: Vec<SampleMeta>,
    test: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    class: usize,
    boundaries: Vec<usize>,
    actions: Vec<usize>,
}

impl Dataset {
    /// Deterministic in `(cfg, channels)`. Samples cycle through classes and
    /// each uses its own random stream.
    pub fn generate(cfg: &DataConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let taxonomy = taxonomy_for(cfg, channels)?;
        let total = cfg.train_samples + cfg.test_samples;
        let mut samples = (0..total)
            .map(|i| {
                let mut rng = stream_rng(cfg.seed, i as u64);
                sample_video(
                    &taxonomy,
                    i % cfg.num_classes,
                    cfg.timesteps,
                    cfg.noise_sigma,
                    cfg.repeat_max,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let test = samples.split_off(cfg.train_samples);
        Ok(Self {
            config: cfg.clone(),
            taxonomy,
            train: samples,
            test,
        })
    }

    pub fn channels(&self) -> usize {
        self.taxonomy.channels()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = |s: &ActivitySample| SampleMeta {
            class: s.class,
            boundaries: s.boundaries.clone(),
            actions: s.actions.clone(),
        };
        let header = serde_json::to_string(&DatasetHeader {
            format_version: FORMAT_VERSION,
            data: self.config.clone(),
            channels: self.channels(),
            classes: self.taxonomy.classes.clone(),
            train: self.train.iter().map(meta).collect(),
            test: self.test.iter().map(meta).collect(),
        })
        .expect("header serializes");
        let mut arrays: Vec<(String, Tensor)> = Vec::new();
        for (name, set) in [("train", &self.train), ("test", &self.test)] {
            if !set.is_empty() {
                arrays.push((name.to_string(), stack(set).expect("samples share a shape")));
            }
        }
        let mut refs: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.taxonomy.embedding)];
        refs.extend(arrays.iter().map(|(n, t)| (n.clone(), t)));
        persist::encode(DATASET_MAGIC, &header, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = persist::decode(DATASET_MAGIC, bytes)?;
        let h: DatasetHeader =
            serde_json::from_str(&c.header).map_err(|e| PicError::Format(format!("dataset header: {e}")))?;
        let embedding = c.array("embedding")?.clone();
        if embedding.ndim() != 2 || embedding.dim(1) != h.channels {
            return Err(PicError::Format("embedding does not match channel count".into()));
        }
        let unpack = |name: &str, metas: Vec<SampleMeta>| -> Result<Vec<ActivitySample>> {
            if metas.is_empty() {
                return Ok(Vec::new());
            }
            let x = c.array(name)?;
            if x.ndim() != 3 || x.dim(0) != metas.len() || x.dim(2) != h.channels {
                return Err(PicError::Format(format!("`{name}` features do not match header")));
            }
            let (n, ch) = (x.dim(1), x.dim(2));
            metas
                .into_iter()
                .enumerate()
                .map(|(i, m)| {
                    if m.actions.len() != n || m.boundaries.last() != Some(&n) {
                        return Err(PicError::Format(format!("`{name}` sample {i} metadata inconsistent")));
                    }
                    Ok(ActivitySample {
                        x: Tensor::new(&[n, ch], x.data()[i * n * ch..(i + 1) * n * ch].to_vec())?,
                        class: m.class,
                        boundaries: m.boundaries,
                        actions: m.actions,
                    })
                })
                .collect()
        };
        Ok(Self {
            config: h.data,
            taxonomy: ActivityTaxonomy {
                classes: h.classes,
                embedding,
            },
            train: unpack("train", h.train)?,
            test: unpack("test", h.test)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        persist::write_file(path, &bytes)?;
        Ok(checksum(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path)?)
    }
}

/// Lower-case hex SHA-256.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stacks sample features into `[B, N, C]`.
pub fn stack(samples: &[ActivitySample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| PicError::Validation("empty batch".into()))?;
    let (n, c) = (first.x.dim(0), first.x.dim(1));
    let mut data = Vec::with_capacity(samples.len() * n * c);
    for s in samples {
        if s.x.shape() != first.x.shape() {
            return Err(PicError::dim("samples differ in shape"));
        }
        data.extend_from_slice(s.x.data());
    }
    Tensor::new(&[samples.len(), n, c], data)
}

/// Labels of `samples` for `task`.
pub fn labels_for(samples: &[ActivitySample], task: Task, tax: &ActivityTaxonomy) -> Result<Labels> {
    match task {
        Task::SingleLabel => Ok(Labels::Single(samples.iter().map(|s| s.class).collect())),
        Task::MultiLabel => {
            let data: Vec<f64> = samples.iter().flat_map(|s| tax.multi_hot(s.class)).collect();
            Ok(Labels::Multi(Tensor::new(&[samples.len(), tax.vocabulary()], data)?))
        }
    }
}
