//! Run configuration shared by data generation, training, evaluation and
//! profiling. Persisted as canonical (compact, fixed field order) JSON.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PicError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared keys/values, local window, max over time.
    #[default]
    Pic,
    /// Position-specific keys, no max over time.
    PicOrdered,
    /// Shared keys/values with one window spanning the whole sequence.
    PicGlobal,
    /// Keys/values produced per window from the input.
    PicInferred,
    /// Standard temporal convolution inside the same residual bottleneck.
    TemporalConv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Pic,
        Variant::PicOrdered,
        Variant::PicGlobal,
        Variant::PicInferred,
        Variant::TemporalConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pic => "pic",
            Variant::PicOrdered => "pic_ordered",
            Variant::PicGlobal => "pic_global",
            Variant::PicInferred => "pic_inferred",
            Variant::TemporalConv => "temporal_conv",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PicError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PicError::config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    SingleLabel,
    MultiLabel,
}

/// Boundary handling of the sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad so the output has the input length; residual is the input.
    #[default]
    Same,
    /// Full windows only; residual is the window mean of the input.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd()
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            epsilon: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: None,
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            weight_decay: 0.0,
            ..Self::sgd()
        }
    }
}

/// Synthetic activity generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub segments_per_class: usize,
    pub actions_per_segment: usize,
    /// Unit-action vocabulary size.
    pub vocabulary: usize,
    pub timesteps: usize,
    pub noise_sigma: f64,
    /// Longest run of consecutive timesteps showing the same unit-action.
    pub repeat_max: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// When set, classes are ordered selections from this many shared
    /// segment sets instead of owning disjoint segments.
    pub segment_pool: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 10,
            segments_per_class: 4,
            actions_per_segment: 3,
            vocabulary: 120,
            timesteps: 64,
            noise_sigma: 0.5,
            repeat_max: 3,
            train_samples: 200,
            test_samples: 100,
            segment_pool: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub model: Option<String>,
    pub history: Option<String>,
    pub report: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub depth: usize,
    /// Window size T.
    pub window: usize,
    pub stride: usize,
    /// Number of keys M.
    pub keys: usize,
    /// Number of values M'.
    pub values: usize,
    /// Feature channels C.
    pub channels: usize,
    /// Bottleneck width C'; `channels / 4` when absent.
    pub bottleneck: Option<usize>,
    /// Hidden width of the classifier head; `channels` when absent.
    pub head_hidden: Option<usize>,
    pub padding: Padding,
    pub task: Task,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub perm_seeds: usize,
    pub threads: usize,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Pic,
            depth: 4,
            window: 9,
            stride: 2,
            keys: 32,
            values: 32,
            channels: 64,
            bottleneck: None,
            head_hidden: None,
            padding: Padding::Same,
            task: Task::SingleLabel,
            data: DataConfig::default(),
            optimizer: OptimizerConfig::sgd(),
            epochs: 100,
            batch_size: 32,
            perm_seeds: 10,
            threads: 1,
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PicError::config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck.unwrap_or(self.channels / 4)
    }

    pub fn hidden_width(&self) -> usize {
        self.head_hidden.unwrap_or(self.channels)
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::SingleLabel => self.data.num_classes,
            Task::MultiLabel => self.data.vocabulary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_model()?;
        self.data.validate()
    }

    /// Checks only the fields that shape the model.
    pub fn validate_model(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("stride", self.stride),
            ("keys", self.keys),
            ("values", self.values),
            ("channels", self.channels),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PicError::config(format!("{name} must be at least 1")));
            }
        }
        if self.bottleneck.is_none() && self.channels % 4 != 0 {
            return Err(PicError::config(format!(
                "channels {} not divisible by 4; set bottleneck explicitly",
                self.channels
            )));
        }
        if self.bottleneck_width() == 0 || self.hidden_width() == 0 {
            return Err(PicError::config("bottleneck and head widths must be positive"));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(PicError::config("learning rate must be finite and non-negative"));
        }
        if self.num_classes() == 0 {
            return Err(PicError::config("at least one class required"));
        }
        Ok(())
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self;
        if d.num_classes == 0 || d.segments_per_class == 0 || d.actions_per_segment == 0 {
            return Err(PicError::config("classes, segments and actions must be positive"));
        }
        if d.repeat_max == 0 {
            return Err(PicError::config("repeat_max must be at least 1"));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(PicError::config("noise_sigma must be finite and non-negative"));
        }
        let needed = match d.segment_pool {
            None => d.num_classes * d.segments_per_class * d.actions_per_segment,
            Some(pool) => {
                if pool < d.segments_per_class {
                    return Err(PicError::config(format!(
                        "segment pool {pool} smaller than segments per class {}",
                        d.segments_per_class
                    )));
                }
                pool * d.actions_per_segment
            }
        };
        if d.vocabulary < needed {
            return Err(PicError::config(format!(
                "vocabulary {} too small, need at least {needed} unit-actions",
                d.vocabulary
            )));
        }
        if d.timesteps / d.segments_per_class < d.actions_per_segment {
            return Err(PicError::config(format!(
                "{} timesteps cannot give each of {} segments {} slots",
                d.timesteps, d.segments_per_class, d.actions_per_segment
            )));
        }
        Ok(())
    }
}
