//! Model and training configuration with their default values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::HistoryOptions;
use crate::error::{CcrsError, Result};

/// Recommendation side: entity encoder and intention pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecConfig {
    /// Entity embedding size `d`.
    pub dim: usize,
    /// Attention heads `k`; must divide `dim`.
    pub heads: usize,
    /// Encoder layers `L`.
    pub layers: usize,
    /// User embedding size; `None` means `dim`.
    pub user_dim: Option<usize>,
    pub max_turns: usize,
    /// Divide attention logits by √d (true) or √(d/k) (false).
    pub scale_full_dim: bool,
    pub history: HistoryOptions,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            layers: 1,
            user_dim: None,
            max_turns: 64,
            scale_full_dim: true,
            history: HistoryOptions::default(),
        }
    }
}

impl RecConfig {
    pub fn user_dim(&self) -> usize {
        self.user_dim.unwrap_or(self.dim)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CcrsError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.layers == 0 {
            return Err(CcrsError::Config("at least one encoder layer is required".into()));
        }
        if self.max_turns == 0 {
            return Err(CcrsError::Config("max_turns must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize, length_alpha: f64 },
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy::Beam { width: 3, length_alpha: 0.75 }
    }
}

/// Dialogue side: transformer, style bank and decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialConfig {
    pub word_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub n_styles: usize,
    /// Hidden width of the bias mapper; `None` means twice the entity dim.
    pub style_hidden: Option<usize>,
    pub style_softmax: bool,
    pub backprop_into_rec: bool,
    pub decode: DecodeStrategy,
    pub max_response_len: usize,
}

impl Default for DialConfig {
    fn default() -> Self {
        Self {
            word_dim: 300,
            model_dim: 300,
            layers: 2,
            heads: 4,
            ffn_dim: 600,
            max_seq_len: 256,
            n_styles: 4,
            style_hidden: None,
            style_softmax: true,
            backprop_into_rec: false,
            decode: DecodeStrategy::default(),
            max_response_len: 30,
        }
    }
}

impl DialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(CcrsError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.n_styles == 0 {
            return Err(CcrsError::Config("n_styles must be at least 1".into()));
        }
        if self.max_seq_len == 0 || self.layers == 0 {
            return Err(CcrsError::Config("max_seq_len and layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub rec: RecConfig,
    pub dial: DialConfig,
}

/// Meta-learning hyper-parameters for one part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub batch_users: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Group names overriding the default inner set.
    pub inner_override: Option<Vec<String>>,
    /// Early-stopping metric: a ranking key such as `hr@50` for the
    /// recommender, `loss` for the dialogue part.
    pub valid_metric: String,
}

impl MetaConfig {
    pub fn rec_default() -> Self {
        Self {
            inner_lr: 0.006,
            outer_lr: 0.003,
            clip_min: 0.0,
            clip_max: 0.1,
            inner_steps: 1,
            first_order: true,
            batch_users: 8,
            epochs: 50,
            patience: 5,
            seed: 17,
            inner_override: None,
            valid_metric: "hr@50".into(),
        }
    }

    pub fn dial_default() -> Self {
        Self { inner_lr: 0.0003, outer_lr: 0.001, valid_metric: "loss".into(), ..Self::rec_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.outer_lr > 0.0) {
            return Err(CcrsError::Config("learning rates must be positive".into()));
        }
        if !(self.clip_min >= 0.0 && self.clip_max >= self.clip_min) {
            return Err(CcrsError::Config(format!(
                "clip range [{}, {}] is invalid",
                self.clip_min, self.clip_max
            )));
        }
        if self.batch_users == 0 {
            return Err(CcrsError::Config("batch_users must be positive".into()));
        }
        Ok(())
    }
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self::rec_default()
    }
}

/// Everything a training run reads from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub rec: MetaConfig,
    pub dial: MetaConfig,
    pub seed: u64,
    /// Free-form notes copied into output manifests.
    pub tags: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            rec: MetaConfig::rec_default(),
            dial: MetaConfig::dial_default(),
            seed: 17,
            tags: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    /// Small dimensions and learning rates that fit the synthetic corpus on a
    /// laptop in minutes.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model.rec = RecConfig { dim: 32, heads: 4, max_turns: 16, ..RecConfig::default() };
        cfg.model.dial = DialConfig {
            word_dim: 32,
            model_dim: 32,
            layers: 1,
            heads: 2,
            ffn_dim: 64,
            max_seq_len: 96,
            ..DialConfig::default()
        };
        cfg.rec.epochs = 100;
        cfg.rec.patience = 25;
        cfg.rec.valid_metric = "mrr@10".into();
        cfg.dial.epochs = 30;
        cfg.dial.patience = 10;
        cfg.dial.outer_lr = 0.01;
        cfg.dial.inner_lr = 0.003;
        cfg
    }

    /// Reads TOML or JSON, chosen by file extension.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CcrsError::io(path, e))?;
        let parsed: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| CcrsError::Config(format!("{}: {e}", path.display())))?
        };
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.rec.validate()?;
        self.model.dial.validate()?;
        self.rec.validate()?;
        self.dial.validate()
    }
}
