//! Plain ANN and CNN regressors sharing the [`Regressor`] interface.

use crate::error::{Error, Result};
use crate::layers::{Dense, SharedConv1d};
use crate::model::{Arch, ForwardCtx, ModelConfig, Regressor};
use crate::numcore::{Graph, Rng, Tensor, Var};

/// Flatten → dense → activation → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnModel {
    cfg: ModelConfig,
    pub hidden: Dense,
    pub out: Dense,
}

/// Shared conv → activation → maxpool → flatten → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    cfg: ModelConfig,
    pub conv: SharedConv1d,
    pub out: Dense,
}

fn check_input(g: &Graph<'_>, x: Var, cfg: &ModelConfig) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != cfg.input_channels || s[2] != cfg.window_width {
        return Err(Error::dim(
            "baseline input",
            format!("{s:?}, expected [N, {}, {}]", cfg.input_channels, cfg.window_width),
        ));
    }
    Ok(s[0])
}

impl AnnModel {
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_width();
        Ok(Self {
            cfg: cfg.clone(),
            hidden: Dense::init(cfg.input_channels * cfg.window_width, h, rng),
            out: Dense::init(h, 1, rng),
        })
    }
}

impl Regressor for AnnModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let n = check_input(g, x, &self.cfg)?;
        let flat = g.reshape(x, &[n, self.cfg.input_channels * self.cfg.window_width])?;
        let z = self.hidden.forward(g, flat)?;
        let z = g.activation(z, self.cfg.activation);
        let z = g.dropout(z, self.cfg.dropout, &mut ctx.rng, ctx.mode.is_train())?;
        let y = self.out.forward(g, z)?;
        g.reshape(y, &[n])
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("hidden.weight".into(), &self.hidden.weight),
            ("hidden.bias".into(), &self.hidden.bias),
            ("out.weight".into(), &self.out.weight),
            ("out.bias".into(), &self.out.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.hidden.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    fn clone_box(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

impl CnnModel {
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stream_channels();
        let w = cfg.stream_geometry()?.out_width;
        Ok(Self {
            cfg: cfg.clone(),
            conv: SharedConv1d::init(cfg.input_channels, s, cfg.kernel_size, 1, cfg.same_padding(), rng),
            out: Dense::init(s * w, 1, rng),
        })
    }
}

impl Regressor for CnnModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, _ctx: &mut ForwardCtx) -> Result<Var> {
        let n = check_input(g, x, &self.cfg)?;
        let h = self.conv.forward(g, x)?;
        let h = g.activation(h, self.cfg.activation);
        let h = g.maxpool1d(h, self.cfg.pool_window, self.cfg.pool_window)?;
        let len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, len])?;
        let y = self.out.forward(g, flat)?;
        g.reshape(y, &[n])
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv.weight".into(), &self.conv.weight),
            ("conv.bias".into(), &self.conv.bias),
            ("out.weight".into(), &self.out.weight),
            ("out.bias".into(), &self.out.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.conv.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    fn clone_box(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

/// Baseline for `arch` (`Ann` or `Cnn`).
pub fn build_baseline(arch: Arch, cfg: &ModelConfig, rng: &mut Rng) -> Result<Box<dyn Regressor>> {
    let cfg = ModelConfig { arch, ..cfg.clone() };
    match arch {
        Arch::Ann => Ok(Box::new(AnnModel::build(&cfg, rng)?)),
        Arch::Cnn => Ok(Box::new(CnnModel::build(&cfg, rng)?)),
        Arch::Menglan => Err(Error::Config("`menglan` is not a baseline tag".into())),
    }
}
