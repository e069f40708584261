//! Run configuration: one JSON document with sections
//! `data`, `model`, `retrieval`, `mil`, `loss`, `training`, `search`, `output`.
//!
//! Unknown keys are rejected; every error carries the JSON path it refers to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmicError, Result};
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub mil: MilConfig,
    pub loss: LossSection,
    pub training: TrainingConfig,
    pub search: SearchConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator settings used by `gen-data`.
    pub synth: SynthSpec,
    /// Model input size; views are center-cropped (or reflect-padded) to it.
    pub image_height: usize,
    pub image_width: usize,
    /// Reflect-pad views smaller than the target instead of rejecting them.
    pub pad_reflect: bool,
    /// Bounded prefetch queue depth for training batches (0 disables prefetching).
    pub prefetch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            image_height: 736,
            image_width: 480,
            pad_reflect: false,
            prefetch: 2,
        }
    }
}

/// Residual CNN layout shared by the localization backbone and the patch encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output channels per residual stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stride of the first stage; every later stage halves the resolution.
    pub first_stage_stride: usize,
    /// Initialize the scale of each block's last normalization to zero.
    pub zero_init_residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            stem_kernel: 5,
            stem_stride: 2,
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            first_stage_stride: 1,
            zero_init_residual: false,
        }
    }
}

impl BackboneConfig {
    /// Total downsampling factor between input pixels and feature cells.
    pub fn downsample(&self) -> usize {
        let later = 1usize << self.widths.len().saturating_sub(1);
        self.stem_stride * self.first_stage_stride * later
    }

    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.stem_width)
    }

    fn validate(&self, path: &str) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.stem_width == 0 {
            return Err(GmicError::config(format!("{path}.widths"), "widths must be positive and nonempty"));
        }
        if self.blocks_per_stage == 0 {
            return Err(GmicError::config(format!("{path}.blocks_per_stage"), "must be at least 1"));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(GmicError::config(format!("{path}.stem_kernel"), "must be odd"));
        }
        for (name, v) in [("stem_stride", self.stem_stride), ("first_stage_stride", self.first_stage_stride)] {
            if !v.is_power_of_two() {
                return Err(GmicError::config(format!("{path}.{name}"), "must be a power of two"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: Vec<String>,
    pub backbone: BackboneConfig,
    /// Initial bias of the saliency head; -2 gives an initial map of about 0.12.
    pub saliency_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: vec!["benign".into(), "malignant".into()],
            backbone: BackboneConfig::default(),
            saliency_bias_init: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Number of patches retrieved per image.
    pub k: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 6,
            crop_height: 256,
            crop_width: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    pub encoder: BackboneConfig,
    /// Patch embedding length.
    pub embedding_dim: usize,
    /// Hidden width of the gated attention.
    pub attention_dim: usize,
    pub attention_bias: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            encoder: BackboneConfig::default(),
            embedding_dim: 128,
            attention_dim: 128,
            attention_bias: false,
        }
    }
}

/// How the configured pooling threshold `t` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TScale {
    /// `t` is a fraction of the map (0.05 means the top 5%).
    Fraction,
    /// `t` is already a percentage.
    Percent,
}

impl TScale {
    pub fn to_percent(self, t: f64) -> f64 {
        match self {
            Self::Fraction => 100.0 * t,
            Self::Percent => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda: f64,
    pub beta: f64,
    pub pooling_t: f64,
    pub t_scale: TScale,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            beta: 1.0,
            pooling_t: (-3.0f64).exp(),
            t_scale: TScale::Fraction,
        }
    }
}

impl LossSection {
    pub fn t_percent(&self) -> f64 {
        self.t_scale.to_percent(self.pooling_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Breasts per batch; each contributes its two views.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub n_models: usize,
    pub top_k: usize,
    pub seed: u64,
    /// Parallel training jobs.
    pub jobs: usize,
    pub log10_learning_rate: [f64; 2],
    pub log10_lambda: [f64; 2],
    pub ln_beta: [f64; 2],
    pub ln_pooling_t: [f64; 2],
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_models: 100,
            top_k: 5,
            seed: 0,
            jobs: 1,
            log10_learning_rate: [-5.5, -3.8],
            log10_lambda: [-5.0, -2.8],
            ln_beta: [-1.6, 1.6],
            ln_pooling_t: [-5.0, -1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub write_predictions: bool,
    /// Save Adam moments alongside parameters in checkpoints.
    pub checkpoint_optimizer: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            write_predictions: true,
            checkpoint_optimizer: false,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            retrieval: RetrievalConfig::default(),
            mil: MilConfig::default(),
            loss: LossSection::default(),
            training: TrainingConfig::default(),
            search: SearchConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            GmicError::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GmicError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Tiny configuration for gradient checks: 64x64 input, 16x16 patches, K = 2.
    pub fn toy() -> Self {
        let small = BackboneConfig {
            stem_width: 4,
            stem_kernel: 3,
            stem_stride: 2,
            widths: vec![4, 6],
            blocks_per_stage: 1,
            first_stage_stride: 2,
            zero_init_residual: false,
        };
        let mut cfg = Self::default();
        cfg.data.image_height = 64;
        cfg.data.image_width = 64;
        cfg.data.synth = SynthSpec::toy();
        cfg.model.backbone = small.clone();
        cfg.retrieval = RetrievalConfig {
            k: 2,
            crop_height: 16,
            crop_width: 16,
        };
        cfg.mil = MilConfig {
            encoder: BackboneConfig {
                widths: vec![4],
                ..small
            },
            embedding_dim: 8,
            attention_dim: 6,
            attention_bias: false,
        };
        cfg.loss.pooling_t = 0.2;
        cfg.training.batch_size = 2;
        cfg.training.epochs = 1;
        cfg
    }

    /// Lean desk-scale model for the default 736x480 synthetic corpus.
    pub fn desk() -> Self {
        let trunk = BackboneConfig {
            stem_width: 8,
            stem_kernel: 5,
            stem_stride: 2,
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            first_stage_stride: 2,
            zero_init_residual: false,
        };
        let mut cfg = Self::default();
        cfg.model.backbone = trunk.clone();
        cfg.retrieval = RetrievalConfig {
            k: 6,
            crop_height: 128,
            crop_width: 128,
        };
        cfg.mil.encoder = trunk;
        cfg.training.learning_rate = 1e-3;
        cfg.training.epochs = 2;
        cfg
    }

    pub fn num_classes(&self) -> usize {
        self.model.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.classes.is_empty() {
            return Err(GmicError::config("model.classes", "at least one class is required"));
        }
        self.model.backbone.validate("model.backbone")?;
        self.mil.encoder.validate("mil.encoder")?;
        let s = self.model.backbone.downsample();
        let (h, w) = (self.data.image_height, self.data.image_width);
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(GmicError::config(
                "data.image_height",
                format!("input {h}x{w} must be divisible by the backbone downsample factor {s}"),
            ));
        }
        let r = &self.retrieval;
        if r.k == 0 {
            return Err(GmicError::config("retrieval.k", "must be at least 1"));
        }
        if r.crop_height == 0 || r.crop_width == 0 || r.crop_height > h || r.crop_width > w {
            return Err(GmicError::config(
                "retrieval.crop_height",
                format!("crop {}x{} must fit the {h}x{w} input", r.crop_height, r.crop_width),
            ));
        }
        if self.mil.embedding_dim == 0 || self.mil.attention_dim == 0 {
            return Err(GmicError::config("mil.embedding_dim", "dimensions must be positive"));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(GmicError::config("loss.lambda", "must be nonnegative"));
        }
        if !(self.loss.beta > 0.0) {
            return Err(GmicError::config("loss.beta", "must be positive"));
        }
        let t = self.loss.t_percent();
        if !(t > 0.0 && t <= 100.0) {
            return Err(GmicError::config("loss.pooling_t", format!("t = {t}% outside (0, 100]")));
        }
        if !(self.training.learning_rate > 0.0) {
            return Err(GmicError::config("training.learning_rate", "must be positive"));
        }
        if self.training.batch_size == 0 {
            return Err(GmicError::config("training.batch_size", "must be at least 1"));
        }
        if self.search.top_k == 0 || self.search.jobs == 0 {
            return Err(GmicError::config("search.top_k", "top_k and jobs must be positive"));
        }
        for (name, [lo, hi]) in [
            ("log10_learning_rate", self.search.log10_learning_rate),
            ("log10_lambda", self.search.log10_lambda),
            ("ln_beta", self.search.ln_beta),
            ("ln_pooling_t", self.search.ln_pooling_t),
        ] {
            if !(lo <= hi) {
                return Err(GmicError::config(format!("search.{name}"), "range must satisfy lo <= hi"));
            }
        }
        self.data.synth.validate("data.synth")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_downsample_is_sixteen() {
        assert_eq!(BackboneConfig::default().downsample(), 16);
        assert_eq!(RunConfig::desk().model.backbone.downsample(), 16);
        assert_eq!(RunConfig::toy().model.backbone.downsample(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RunConfig::from_json(r#"{"loss": {"lambda": 0.1, "gamma": 2}}"#).unwrap_err();
        match err {
            GmicError::Config { path, .. } => assert!(path.starts_with("loss"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(err_code(r#"{"trainin": {}}"#), 2);
    }

    fn err_code(text: &str) -> i32 {
        RunConfig::from_json(text).unwrap_err().exit_code()
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn semantic_validation() {
        assert_eq!(err_code(r#"{"data": {"image_height": 100}}"#), 2);
        assert_eq!(err_code(r#"{"loss": {"beta": 0}}"#), 2);
        assert_eq!(err_code(r#"{"loss": {"pooling_t": 2.0}}"#), 2);
        assert!(RunConfig::from_json(r#"{"loss": {"pooling_t": 50, "t_scale": "percent"}}"#).is_ok());
    }

    #[test]
    fn t_scale_conversion() {
        assert_eq!(TScale::Fraction.to_percent(0.05), 5.0);
        assert_eq!(TScale::Percent.to_percent(5.0), 5.0);
    }
}
