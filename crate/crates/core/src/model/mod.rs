//! Model assembly, shared model interface, size presets and checkpoints.

mod checkpoint;
mod config;
mod menglan;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{geometry_hash_hex, Arch, ModelConfig, StreamGeometry};
pub use menglan::{
    dual_stream_forward, frm_forward, hmha_forward, Decoder, FrmParams, FrmTrace, HmhaParams, HmhaTrace, MenglanModel,
    BN_FRM1, BN_FRM2,
};

pub(crate) use config::to_hex;

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{BatchNormState, Mode};
use crate::numcore::{par, BatchStats, Graph, Rng, Tensor, Var};

/// Per-forward state: mode, dropout randomness and the batch-norm statistics
/// produced in training mode (keyed by the model's batch-norm slot).
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: Rng,
    bn_stats: Vec<(usize, BatchStats)>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: Rng) -> Self {
        Self {
            mode,
            rng,
            bn_stats: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference, Rng::new(0))
    }

    pub fn record_bn(&mut self, slot: usize, stats: BatchStats) {
        self.bn_stats.push((slot, stats));
    }

    pub fn take_bn_stats(&mut self) -> Vec<(usize, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Common interface of every trainable regressor (the main model and the baselines).
///
/// `forward` maps `x[N, C_in, W]` to predictions `[N]`. Parameters are
/// enumerated in a fixed declaration order shared by `named_params` and
/// `params_mut`; checkpoints and the optimizer rely on that order.
pub trait Regressor: Send + Sync + fmt::Debug {
    fn config(&self) -> &ModelConfig;

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, ctx: &mut ForwardCtx) -> Result<Var>;

    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn batch_norms(&self) -> Vec<&BatchNormState> {
        Vec::new()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Regressor>;
}

impl Clone for Box<dyn Regressor> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Blends recorded training-batch statistics into the running estimates.
pub fn commit_bn_stats(model: &mut dyn Regressor, stats: Vec<(usize, BatchStats)>) {
    let mut bns = model.batch_norms_mut();
    for (slot, st) in stats {
        if let Some(bn) = bns.get_mut(slot) {
            bn.commit(&st);
        }
    }
}

/// Builds the network described by `cfg`, initialized from `rng`.
pub fn build_model_with(cfg: &ModelConfig, rng: &mut Rng) -> Result<Box<dyn Regressor>> {
    cfg.validate()?;
    Ok(match cfg.arch {
        Arch::Menglan => Box::new(MenglanModel::build(cfg, rng)?),
        Arch::Ann | Arch::Cnn => crate::trainer::build_baseline(cfg.arch, cfg, rng)?,
    })
}

/// Builds the network described by `cfg` with the init stream derived from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Box<dyn Regressor>> {
    build_model_with(cfg, &mut Rng::new(cfg.seed).derive("init"))
}

/// Exact scalar-parameter count and its serialized size (8 bytes per `f64`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSize {
    pub count: usize,
    pub bytes: usize,
}

impl ParamSize {
    pub fn from_count(count: usize) -> Self {
        Self { count, bytes: count * 8 }
    }

    pub fn mebibytes(&self) -> f64 {
        self.bytes as f64 / MIB
    }
}

pub const MIB: f64 = 1024.0 * 1024.0;

pub fn count_params(model: &dyn Regressor) -> ParamSize {
    ParamSize::from_count(model.named_params().iter().map(|(_, t)| t.len()).sum())
}

/// Parameter count implied by a config, computed from the layer shapes
/// without allocating the model.
pub fn expected_param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (k, cin) = (cfg.kernel_size, cfg.input_channels);
    Ok(match cfg.arch {
        Arch::Menglan => {
            let geom = cfg.stream_geometry()?;
            let s = cfg.stream_channels();
            let c = 2 * s;
            let mut n = 0;
            for (stage, &w) in geom.stage_widths.iter().enumerate() {
                let i = if stage == 0 { cin } else { s };
                n += s * i * k + s;
                n += w * (s * i * k + s);
            }
            n += 2 * (c * c * k + c) + 4 * c;
            n += 4 * c * c + geom.out_width * (c * c * k + c) + (2 * c * c + c);
            let h = cfg.hidden_width();
            n + c * geom.out_width * h + h + h + 1
        }
        Arch::Ann => {
            let h = cfg.hidden_width();
            cin * cfg.window_width * h + h + h + 1
        }
        Arch::Cnn => {
            let s = cfg.stream_channels();
            let w = cfg.stream_geometry()?.out_width;
            s * cin * k + s + s * w + 1
        }
    })
}

/// Three model sizes whose serialized parameter payloads target the
/// reference sizes 8.93 MB, 21.83 MB and 71.63 MB (MiB, 8-byte floats).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizePreset {
    Small,
    Medium,
    Large,
}

impl SizePreset {
    pub const ALL: [SizePreset; 3] = [SizePreset::Small, SizePreset::Medium, SizePreset::Large];

    pub fn target_mib(self) -> f64 {
        match self {
            SizePreset::Small => 8.93,
            SizePreset::Medium => 21.83,
            SizePreset::Large => 71.63,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Small => "small",
            SizePreset::Medium => "medium",
            SizePreset::Large => "large",
        }
    }

    /// `base` with the width multiplier whose parameter payload lands
    /// closest to the target size.
    pub fn config(self, base: &ModelConfig) -> Result<ModelConfig> {
        calibrate_width(base, self.target_mib() * MIB)
    }
}

impl std::str::FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizePreset::Small),
            "medium" => Ok(SizePreset::Medium),
            "large" => Ok(SizePreset::Large),
            other => Err(Error::Config(format!("unknown size preset `{other}`"))),
        }
    }
}

/// Scans stream widths (in steps the head count allows) and returns the
/// config whose byte size is closest to `target_bytes`.
pub fn calibrate_width(base: &ModelConfig, target_bytes: f64) -> Result<ModelConfig> {
    let mut best: Option<(f64, ModelConfig)> = None;
    let mut channels = 1usize;
    loop {
        let cfg = ModelConfig {
            width_multiplier: channels as f64 / base.base_channels as f64,
            ..base.clone()
        };
        let bytes = (expected_param_count(&cfg)? * 8) as f64;
        let err = (bytes - target_bytes).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, cfg));
        }
        if bytes > target_bytes {
            break;
        }
        channels += 1;
    }
    Ok(best.expect("at least one candidate").1)
}

fn single_window(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if x.shape() != [cfg.input_channels, cfg.window_width] {
        return Err(Error::dim(
            "predict",
            format!("window {:?}, expected [{}, {}]", x.shape(), cfg.input_channels, cfg.window_width),
        ));
    }
    x.clone().reshape(&[1, cfg.input_channels, cfg.window_width])
}

/// Prediction for one `[C_in, W]` window.
///
/// Inference mode is deterministic. Training mode uses dropout drawn from a
/// stream derived from the config seed and batch statistics of this single
/// window; running statistics are not touched.
pub fn predict(model: &dyn Regressor, x: &Tensor, mode: Mode) -> Result<f64> {
    let xb = single_window(x, model.config())?;
    let mut ctx = ForwardCtx::new(mode, Rng::new(model.config().seed).derive("predict"));
    let mut g = Graph::new();
    let v = g.constant(xb);
    let y = model.forward(&mut g, v, &mut ctx)?;
    g.value(y).data().first().copied().ok_or_else(|| Error::Contract("empty prediction".into()))
}

/// Inference-mode predictions for a batch `x[N, C_in, W]`.
pub fn predict_batch(model: &dyn Regressor, x: &Tensor) -> Result<Vec<f64>> {
    let mut ctx = ForwardCtx::inference();
    let mut g = Graph::new();
    let v = g.constant_ref(x);
    let y = model.forward(&mut g, v, &mut ctx)?;
    Ok(g.value(y).data().to_vec())
}

/// Windows per inference batch in [`predict_many`].
pub const EVAL_CHUNK: usize = 64;

/// Inference-mode predictions over many windows, chunked and spread over
/// worker threads when the `parallel` feature is on. Output order follows
/// input order and values do not depend on the chunking.
pub fn predict_many(model: &dyn Regressor, windows: &[&Tensor]) -> Result<Vec<f64>> {
    let chunks: Vec<&[&Tensor]> = windows.chunks(EVAL_CHUNK).collect();
    let work = windows.len() * count_params(model).count;
    let parts = par::map_range(chunks.len(), work, |i| {
        Tensor::stack(chunks[i]).and_then(|x| predict_batch(model, &x))
    });
    let mut out = Vec::with_capacity(windows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// [`predict_many`] on the calling thread only.
pub fn predict_many_sequential(model: &dyn Regressor, windows: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        out.extend(predict_batch(model, &Tensor::stack(chunk)?)?);
    }
    Ok(out)
}
