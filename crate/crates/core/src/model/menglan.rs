//! The dual-stream / feature-reactivation / hybrid-attention regressor.
//!
//! Data flow for a batch `x[N, C_in, W]`:
//!
//! ```text
//! x ─┬─ global stream: (shared conv → act → maxpool) × depth ─┐
//!    └─ local stream:  (local conv  → act → maxpool) × depth ─┴─ concat → F
//! F → FRM: BN₂(conv₂(BN₁(conv₁(F)))) + F                      → rFeature
//! rFeature → HMHA: [MHA over time ‖ local conv] → 1×1 conv    → H
//! H → flatten → dense → act → dropout → dense                 → ŷ[N]
//! ```
//!
//! With `use_frm = false` the FRM block is skipped (`rFeature = F`); with
//! `use_hmha = false` the HMHA block returns its input unchanged.

use crate::error::{Error, Result};
use crate::layers::{BatchNormState, Dense, LocalConv1d, Mode, MultiHeadAttention, SharedConv1d};
use crate::numcore::{Graph, Rng, Tensor, Var};

use super::config::ModelConfig;
use super::{ForwardCtx, Regressor};

/// Conv → BN → conv → BN with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct FrmParams {
    pub conv1: SharedConv1d,
    pub bn1: BatchNormState,
    pub conv2: SharedConv1d,
    pub bn2: BatchNormState,
}

/// Intermediates of one FRM pass, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FrmTrace {
    pub o1: Var,
    pub bn1: Var,
    pub o2: Var,
    pub bn2: Var,
    pub out: Var,
}

impl FrmParams {
    pub fn init(channels: usize, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (k, pad) = (cfg.kernel_size, cfg.same_padding());
        Ok(Self {
            conv1: SharedConv1d::init(channels, channels, k, 1, pad, rng),
            bn1: BatchNormState::new(channels, cfg.bn_momentum, cfg.bn_eps)?,
            conv2: SharedConv1d::init(channels, channels, k, 1, pad, rng),
            bn2: BatchNormState::new(channels, cfg.bn_momentum, cfg.bn_eps)?,
        })
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, f: Var, ctx: &mut ForwardCtx) -> Result<FrmTrace> {
        let s = g.shape(f).to_vec();
        let ch = self.conv1.in_channels();
        if s.len() != 3 || s[1] != ch {
            return Err(Error::dim("frm_forward", format!("input {s:?} for {ch} channels")));
        }
        let o1 = self.conv1.forward(g, f)?;
        let (bn1, st1) = self.bn1.forward(g, o1, ctx.mode)?;
        let o2 = self.conv2.forward(g, bn1)?;
        let (bn2, st2) = self.bn2.forward(g, o2, ctx.mode)?;
        if let Some(st) = st1 {
            ctx.record_bn(BN_FRM1, st);
        }
        if let Some(st) = st2 {
            ctx.record_bn(BN_FRM2, st);
        }
        let out = g.add(bn2, f)?;
        if g.shape(out) != s.as_slice() {
            return Err(Error::dim("frm_forward", "residual shape changed"));
        }
        Ok(FrmTrace { o1, bn1, o2, bn2, out })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("frm.conv1.weight", &self.conv1.weight),
            ("frm.conv1.bias", &self.conv1.bias),
            ("frm.bn1.gamma", &self.bn1.gamma),
            ("frm.bn1.beta", &self.bn1.beta),
            ("frm.conv2.weight", &self.conv2.weight),
            ("frm.conv2.bias", &self.conv2.bias),
            ("frm.bn2.gamma", &self.bn2.gamma),
            ("frm.bn2.beta", &self.bn2.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.conv1.params_mut());
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v
    }
}

/// Batch-norm slots recorded in [`ForwardCtx`].
pub const BN_FRM1: usize = 0;
pub const BN_FRM2: usize = 1;

/// Multi-head attention over time in parallel with a position-specific
/// convolution, fused back to the input width by a 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HmhaParams {
    pub attention: MultiHeadAttention,
    pub local: LocalConv1d,
    pub fusion: SharedConv1d,
}

/// Branch outputs of one HMHA pass.
#[derive(Debug, Clone, Copy)]
pub struct HmhaTrace {
    pub attention: Var,
    pub local: Var,
    pub out: Var,
}

impl HmhaParams {
    pub fn init(channels: usize, width: usize, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::init(channels, cfg.heads, rng)?,
            local: LocalConv1d::init(channels, channels, cfg.kernel_size, 1, cfg.same_padding(), width, rng)?,
            fusion: SharedConv1d::init(2 * channels, channels, 1, 1, 0, rng),
        })
    }

    /// `r[N, ch, W]` → `[N, ch, W]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, r: Var) -> Result<HmhaTrace> {
        let s = g.shape(r).to_vec();
        let ch = self.attention.d_model();
        if s.len() != 3 || s[1] != ch {
            return Err(Error::dim("hmha_forward", format!("input {s:?} for {ch} channels")));
        }
        // tokens are time steps, features are channels
        let tokens = g.permute(r, &[0, 2, 1])?;
        let attended = self.attention.forward(g, tokens)?;
        let attention = g.permute(attended, &[0, 2, 1])?;
        let local = self.local.forward(g, r)?;
        let both = g.concat(&[attention, local], 1)?;
        let out = self.fusion.forward(g, both)?;
        Ok(HmhaTrace { attention, local, out })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("hmha.attention.w_q", &self.attention.w_q),
            ("hmha.attention.w_k", &self.attention.w_k),
            ("hmha.attention.w_v", &self.attention.w_v),
            ("hmha.attention.w_o", &self.attention.w_o),
            ("hmha.local.weight", &self.local.weight),
            ("hmha.local.bias", &self.local.bias),
            ("hmha.fusion.weight", &self.fusion.weight),
            ("hmha.fusion.bias", &self.fusion.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.attention.params_mut());
        v.extend(self.local.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }
}

/// Dense → activation → dropout → dense → scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Dense,
    pub out: Dense,
}

impl Decoder {
    pub fn init(n_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Dense::init(n_in, hidden, rng),
            out: Dense::init(hidden, 1, rng),
        }
    }

    /// `h[N, ...]` → `[N]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, h: Var, cfg: &ModelConfig, ctx: &mut ForwardCtx) -> Result<Var> {
        let n = g.shape(h)[0];
        let flat_len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, flat_len])?;
        let z = self.hidden.forward(g, flat)?;
        let z = g.activation(z, cfg.activation);
        let z = g.dropout(z, cfg.dropout, &mut ctx.rng, ctx.mode.is_train())?;
        let y = self.out.forward(g, z)?;
        g.reshape(y, &[n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MenglanModel {
    cfg: ModelConfig,
    pub global: Vec<SharedConv1d>,
    pub local: Vec<LocalConv1d>,
    pub frm: FrmParams,
    pub hmha: HmhaParams,
    pub decoder: Decoder,
}

impl MenglanModel {
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.stream_geometry()?;
        let s = cfg.stream_channels();
        let (k, pad) = (cfg.kernel_size, cfg.same_padding());
        let mut global = Vec::with_capacity(cfg.stream_depth);
        let mut local = Vec::with_capacity(cfg.stream_depth);
        for (stage, &w) in geom.stage_widths.iter().enumerate() {
            let cin = if stage == 0 { cfg.input_channels } else { s };
            global.push(SharedConv1d::init(cin, s, k, 1, pad, rng));
            local.push(LocalConv1d::init(cin, s, k, 1, pad, w, rng)?);
        }
        let ch = 2 * s;
        let frm = FrmParams::init(ch, cfg, rng)?;
        let hmha = HmhaParams::init(ch, geom.out_width, cfg, rng)?;
        let decoder = Decoder::init(ch * geom.out_width, cfg.hidden_width(), rng);
        Ok(Self {
            cfg: cfg.clone(),
            global,
            local,
            frm,
            hmha,
            decoder,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.cfg.stream_geometry().expect("validated at build").out_width
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.cfg.input_channels || s[2] != self.cfg.window_width {
            return Err(Error::dim(
                "dual_stream_forward",
                format!(
                    "input {s:?}, expected [N, {}, {}]",
                    self.cfg.input_channels, self.cfg.window_width
                ),
            ));
        }
        Ok(())
    }

    /// Global (shared-kernel) stream alone.
    pub fn global_stream<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.global {
            h = conv.forward(g, h)?;
            h = g.activation(h, self.cfg.activation);
            h = g.maxpool1d(h, self.cfg.pool_window, self.cfg.pool_window)?;
        }
        Ok(h)
    }

    /// Local (position-specific) stream alone.
    pub fn local_stream<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.local {
            h = conv.forward(g, h)?;
            h = g.activation(h, self.cfg.activation);
            h = g.maxpool1d(h, self.cfg.pool_window, self.cfg.pool_window)?;
        }
        Ok(h)
    }

    /// Fused map `F = concat(global, local)` along channels.
    pub fn dual_stream<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let a = self.global_stream(g, x)?;
        let b = self.local_stream(g, x)?;
        g.concat(&[a, b], 1)
    }

    /// `rFeature`, or `F` itself when the FRM is ablated.
    pub fn reactivate<'a>(&'a self, g: &mut Graph<'a>, f: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if !self.cfg.use_frm {
            return Ok(f);
        }
        Ok(self.frm.forward(g, f, ctx)?.out)
    }

    /// HMHA output, or the input var itself when the block is ablated.
    pub fn attend<'a>(&'a self, g: &mut Graph<'a>, r: Var) -> Result<Var> {
        if !self.cfg.use_hmha {
            return Ok(r);
        }
        let ch = g.shape(r).get(1).copied().unwrap_or(0);
        if ch % self.cfg.heads != 0 {
            return Err(Error::Config(format!("{ch} channels not divisible by {} heads", self.cfg.heads)));
        }
        Ok(self.hmha.forward(g, r)?.out)
    }
}

impl Regressor for MenglanModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let f = self.dual_stream(g, x)?;
        let r = self.reactivate(g, f, ctx)?;
        let h = self.attend(g, r)?;
        self.decoder.forward(g, h, &self.cfg, ctx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.global.iter().enumerate() {
            v.push((format!("global.{i}.weight"), &c.weight));
            v.push((format!("global.{i}.bias"), &c.bias));
        }
        for (i, c) in self.local.iter().enumerate() {
            v.push((format!("local.{i}.weight"), &c.weight));
            v.push((format!("local.{i}.bias"), &c.bias));
        }
        v.extend(self.frm.params().into_iter().map(|(n, t)| (n.to_string(), t)));
        v.extend(self.hmha.params().into_iter().map(|(n, t)| (n.to_string(), t)));
        v.push(("decoder.hidden.weight".into(), &self.decoder.hidden.weight));
        v.push(("decoder.hidden.bias".into(), &self.decoder.hidden.bias));
        v.push(("decoder.out.weight".into(), &self.decoder.out.weight));
        v.push(("decoder.out.bias".into(), &self.decoder.out.bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.global {
            v.extend(c.params_mut());
        }
        for c in &mut self.local {
            v.extend(c.params_mut());
        }
        v.extend(self.frm.params_mut());
        v.extend(self.hmha.params_mut());
        v.extend(self.decoder.hidden.params_mut());
        v.extend(self.decoder.out.params_mut());
        v
    }

    fn batch_norms(&self) -> Vec<&BatchNormState> {
        vec![&self.frm.bn1, &self.frm.bn2]
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState> {
        vec![&mut self.frm.bn1, &mut self.frm.bn2]
    }

    fn clone_box(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

/// Eager dual-stream pass on one `[C_in, W]` window.
pub fn dual_stream_forward(model: &MenglanModel, x: &Tensor) -> Result<Tensor> {
    let xb = single_batch(x)?;
    let mut g = Graph::new();
    let v = g.constant(xb);
    let f = model.dual_stream(&mut g, v)?;
    unbatch(g.take(f))
}

/// Eager FRM pass on `F[N, ch, W]`; in training mode the batch statistics are committed.
pub fn frm_forward(frm: &mut FrmParams, f: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(mode, Rng::new(0));
    let out = {
        let mut g = Graph::new();
        let v = g.constant_ref(f);
        let t = frm.forward(&mut g, v, &mut ctx)?;
        g.take(t.out)
    };
    for (slot, st) in ctx.take_bn_stats() {
        match slot {
            BN_FRM1 => frm.bn1.commit(&st),
            _ => frm.bn2.commit(&st),
        }
    }
    Ok(out)
}

/// Eager HMHA pass on `r[ch, W]` honoring the model's `use_hmha` switch.
pub fn hmha_forward(model: &MenglanModel, r: &Tensor) -> Result<Tensor> {
    let rb = single_batch(r)?;
    let mut g = Graph::new();
    let v = g.constant(rb);
    let h = model.attend(&mut g, v)?;
    unbatch(g.take(h))
}

fn single_batch(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("model input", format!("expected [C, W], got {:?}", x.shape())));
    }
    x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])
}

fn unbatch(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}
