use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, WarpRanges};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Training configuration, stored as a flat TOML file.
///
/// Every key is optional and defaults to the desk-scale setup. Unknown keys
/// are rejected so typos do not pass silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Samples per gradient chunk. Chunks are reduced in a fixed order, so
    /// results do not depend on the number of worker threads.
    pub chunk_size: usize,

    pub input_width: usize,
    pub input_height: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub classes: usize,
    pub ffn_hidden: usize,
    pub use_attention: bool,
    pub use_vpl: bool,

    pub jitter_strength: f64,
    pub warp_prob: f64,
    pub warp_rotation_deg: f64,
    pub warp_scale: [f64; 2],
    pub warp_translate: f64,
    pub warp_perspective: f64,
    pub mask_prob: f64,
    pub mask_max_frac: f64,
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let a = AugmentConfig::default();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            batch_size: 64,
            base_lr: 3e-4,
            warmup_steps: 100,
            max_steps: 2000,
            early_stop_patience: 5,
            eval_every: 125,
            weight_decay: 0.01,
            grad_clip: 5.0,
            chunk_size: 16,
            input_width: m.input_width,
            input_height: m.input_height,
            channels: m.channels,
            strides: m.strides,
            heads: m.heads,
            head_dim: m.head_dim,
            classes: m.classes,
            ffn_hidden: m.ffn_hidden,
            use_attention: m.use_attention,
            use_vpl: m.use_vpl,
            jitter_strength: a.jitter_strength,
            warp_prob: a.warp_prob,
            warp_rotation_deg: a.warp.rotation_deg,
            warp_scale: a.warp.scale,
            warp_translate: a.warp.translate,
            warp_perspective: a.warp.perspective,
            mask_prob: a.mask_prob,
            mask_max_frac: a.mask_max_frac,
            flip_prob: a.flip_prob,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_width: self.input_width,
            input_height: self.input_height,
            channels: self.channels.clone(),
            strides: self.strides.clone(),
            heads: self.heads,
            head_dim: self.head_dim,
            classes: self.classes,
            ffn_hidden: self.ffn_hidden,
            use_attention: self.use_attention,
            use_vpl: self.use_vpl,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            jitter_strength: self.jitter_strength,
            warp_prob: self.warp_prob,
            warp: WarpRanges {
                rotation_deg: self.warp_rotation_deg,
                scale: self.warp_scale,
                translate: self.warp_translate,
                perspective: self.warp_perspective,
            },
            mask_prob: self.mask_prob,
            mask_max_frac: self.mask_max_frac,
            flip_prob: self.flip_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return fail("batch_size and chunk_size must be at least 1");
        }
        if !(self.base_lr > 0.0) {
            return fail("base_lr must be positive");
        }
        if self.max_steps > 0 && self.warmup_steps >= self.max_steps {
            return fail("warmup_steps must be smaller than max_steps");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return fail("grad_clip must be positive and weight_decay non-negative");
        }
        self.model().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
