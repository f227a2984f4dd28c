use crate::error::{Error, Result};
use crate::numcore::{BatchStats, Graph, NormStats, Tensor, Var};

use super::Mode;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel batch normalization with running statistics.
///
/// Training normalizes with the batch mean and (biased) variance over batch
/// and width, then blends them into the running estimates:
/// `running = (1 - momentum) * running + momentum * batch`. Inference
/// normalizes with the running estimates and never mutates state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("batch-norm momentum {momentum} outside (0, 1)")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch-norm eps {eps} must be > 0")));
        }
        Ok(Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Graph forward. In training mode the returned batch statistics must be
    /// handed back to [`BatchNormState::commit`] once the step is done.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
        let stats = match mode {
            Mode::Train => NormStats::Batch { eps: self.eps },
            Mode::Inference => NormStats::Fixed {
                mean: &self.running_mean,
                var: &self.running_var,
                eps: self.eps,
            },
        };
        g.batch_norm(x, gm, bt, stats)
    }

    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Eager batch-norm over `[N, C, W]` or `[N, C]`; updates running stats in training mode.
pub fn batchnorm(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (out, stats) = {
        let mut g = Graph::new();
        let v = g.constant_ref(x);
        let (y, stats) = state.forward(&mut g, v, mode)?;
        (g.take(y), stats)
    };
    if let Some(s) = stats {
        state.commit(&s);
    }
    Ok(out)
}
