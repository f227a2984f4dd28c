use std::fs;
use std::path::Path;

use menglan::data::TargetGas;
use menglan::layers::Activation;
use menglan::model::{Arch, ModelConfig, SizePreset};
use menglan::trainer::{AdamConfig, DecayMode, TrainConfig};
use menglan::{Error, Result};
use serde::{Deserialize, Serialize};

/// Flat run configuration read from a TOML file.
///
/// Every key is optional; omitted keys take the library defaults. Input
/// geometry (channels, window width) always comes from the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,

    pub arch: Arch,
    /// Overrides `width_multiplier` when set.
    pub preset: Option<String>,
    pub width_multiplier: f64,
    pub base_channels: usize,
    pub base_hidden: usize,
    pub stream_depth: usize,
    pub kernel_size: usize,
    pub pool_window: usize,
    pub heads: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub use_frm: bool,
    pub use_hmha: bool,
    pub target: TargetGas,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            decay: t.adam.decay,
            decay_mode: t.adam.decay_mode,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience_epochs: t.patience,
            arch: m.arch,
            preset: None,
            width_multiplier: m.width_multiplier,
            base_channels: m.base_channels,
            base_hidden: m.base_hidden,
            stream_depth: m.stream_depth,
            kernel_size: m.kernel_size,
            pool_window: m.pool_window,
            heads: m.heads,
            activation: m.activation,
            dropout: m.dropout,
            use_frm: m.use_frm,
            use_hmha: m.use_hmha,
            target: m.target,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience_epochs,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                decay: self.decay,
                decay_mode: self.decay_mode,
            },
        }
    }

    /// Model config for inputs of `channels × width`.
    pub fn model_config(&self, channels: usize, width: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            arch: self.arch,
            input_channels: channels,
            window_width: width,
            width_multiplier: self.width_multiplier,
            base_channels: self.base_channels,
            base_hidden: self.base_hidden,
            stream_depth: self.stream_depth,
            kernel_size: self.kernel_size,
            pool_window: self.pool_window,
            heads: self.heads,
            activation: self.activation,
            dropout: self.dropout,
            use_frm: self.use_frm,
            use_hmha: self.use_hmha,
            target: self.target,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            seed: self.seed,
        };
        let cfg = match &self.preset {
            Some(name) => name.parse::<SizePreset>()?.config(&cfg)?,
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
