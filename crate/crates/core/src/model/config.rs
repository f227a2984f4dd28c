use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TargetGas;
use crate::error::{Error, Result};
use crate::layers::{Activation, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::numcore::kernels::conv_out_width;

/// Which network a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Menglan,
    Ann,
    Cnn,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Menglan => "menglan",
            Arch::Ann => "ann",
            Arch::Cnn => "cnn",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "menglan" => Ok(Arch::Menglan),
            "ann" => Ok(Arch::Ann),
            "cnn" => Ok(Arch::Cnn),
            other => Err(Error::Config(format!("unknown model tag `{other}`"))),
        }
    }
}

/// Architecture, ablation and regularization settings of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_channels: usize,
    pub window_width: usize,
    /// Scales every channel count and the decoder width.
    pub width_multiplier: f64,
    /// Channels per stream at multiplier 1.
    pub base_channels: usize,
    /// Decoder hidden width at multiplier 1.
    pub base_hidden: usize,
    /// Conv + pool stages per stream.
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
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Menglan,
            input_channels: 16,
            window_width: 100,
            width_multiplier: 1.0,
            base_channels: 8,
            base_hidden: 32,
            stream_depth: 2,
            kernel_size: 3,
            pool_window: 2,
            heads: 8,
            activation: Activation::Relu,
            dropout: 0.2,
            use_frm: true,
            use_hmha: true,
            target: TargetGas::Ethylene,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
            seed: 42,
        }
    }
}

/// Stage-by-stage widths of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamGeometry {
    /// Input width of each stage; the local bank of stage `i` has `stage_widths[i]` positions.
    pub stage_widths: Vec<usize>,
    pub out_width: usize,
}

impl ModelConfig {
    /// Small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            window_width: 16,
            base_channels: 4,
            base_hidden: 8,
            heads: 2,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Channels per stream: `base_channels * width_multiplier`, rounded up so
    /// that the fused map (two streams) splits evenly over the heads.
    pub fn stream_channels(&self) -> usize {
        let raw = (self.base_channels as f64 * self.width_multiplier).round().max(1.0) as usize;
        let step = if self.heads.is_multiple_of(2) { self.heads / 2 } else { self.heads };
        let step = step.max(1);
        raw.div_ceil(step) * step
    }

    /// Channels of the fused dual-stream map.
    pub fn fused_channels(&self) -> usize {
        2 * self.stream_channels()
    }

    pub fn hidden_width(&self) -> usize {
        (self.base_hidden as f64 * self.width_multiplier).round().max(1.0) as usize
    }

    pub fn same_padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.window_width == 0 {
            return bad("input channels and window width must be positive".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(format!("width_multiplier {} must be > 0", self.width_multiplier));
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd (same-width convolutions)", self.kernel_size));
        }
        if self.pool_window == 0 {
            return bad("pool_window must be >= 1".into());
        }
        if self.stream_depth == 0 {
            return bad("stream_depth must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("bn_momentum {} outside (0, 1)", self.bn_momentum));
        }
        if self.bn_eps <= 0.0 {
            return bad(format!("bn_eps {} must be > 0", self.bn_eps));
        }
        if self.arch != Arch::Ann {
            self.stream_geometry()?;
        }
        Ok(())
    }

    /// Widths through the conv+pool stages, or a config error naming the failing stage.
    pub fn stream_geometry(&self) -> Result<StreamGeometry> {
        let mut w = self.window_width;
        let mut stage_widths = Vec::with_capacity(self.stream_depth);
        let depth = if self.arch == Arch::Cnn { 1 } else { self.stream_depth };
        for stage in 0..depth {
            let conv = conv_out_width(w, self.kernel_size, 1, self.same_padding()).ok_or_else(|| {
                Error::Config(format!("stage {}: width {w} too small for kernel {}", stage + 1, self.kernel_size))
            })?;
            if conv < self.pool_window {
                return Err(Error::Config(format!(
                    "stage {}: width {conv} smaller than pool window {} (window_width {} too small for depth {})",
                    stage + 1,
                    self.pool_window,
                    self.window_width,
                    self.stream_depth
                )));
            }
            stage_widths.push(w);
            w = (conv - self.pool_window) / self.pool_window + 1;
        }
        Ok(StreamGeometry {
            stage_widths,
            out_width: w,
        })
    }

    /// Canonical record: JSON with keys in sorted order.
    pub fn canonical_record(&self) -> String {
        // serde_json's default map is ordered by key, so the text does not
        // depend on field declaration order.
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("json value serializes")
    }

    pub fn from_record(record: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(record).map_err(|e| Error::Format(format!("config record: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical record.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_record().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        to_hex(&self.hash())
    }

    /// Hash of the input geometry a dataset archive must match.
    pub fn geometry_hash_hex(&self) -> String {
        geometry_hash_hex(self.input_channels, self.window_width)
    }
}

pub fn geometry_hash_hex(channels: usize, window_width: usize) -> String {
    let text = format!("channels={channels};window_width={window_width}");
    to_hex(&Sha256::digest(text.as_bytes()))
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
