//! Layer vocabulary: shared and position-specific 1-D convolution,
//! max-pooling, activations, batch normalization, dropout, dense and
//! (multi-head) attention.
//!
//! Each layer type exposes a graph `forward` used by the models, and an
//! eager free function over plain tensors for direct use and testing.

mod attention;
mod conv;
mod norm;

pub use attention::{attend, attention_weights, multi_head_attention, scaled_dot_attention, MultiHeadAttention};
pub use conv::{conv1d_local, conv1d_shared, LocalConv1d, SharedConv1d};
pub use norm::{batchnorm, BatchNormState, DEFAULT_EPS, DEFAULT_MOMENTUM};

pub use crate::numcore::Activation;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

/// Train/inference switch for batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Fully connected layer `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[n_in, n_out]`
    pub weight: Tensor,
    /// `[n_out]`
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::dim("dense", format!("W {:?} b {:?}", weight.shape(), bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[n_in, n_out], n_in, rng),
            bias: fan_in_uniform(&[n_out], n_in, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `x[N, n_in] -> [N, n_out]`
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Eager dense layer on a vector `x[n]` (or a batch `[N, n]`).
pub fn dense(x: &Tensor, layer: &Dense) -> Result<Tensor> {
    let rows = if x.rank() == 1 { x.clone().reshape(&[1, x.len()])? } else { x.clone() };
    let mut g = Graph::new();
    let v = g.constant(rows);
    let y = layer.forward(&mut g, v)?;
    let y = g.take(y);
    if x.rank() == 1 {
        let m = y.len();
        y.reshape(&[m])
    } else {
        Ok(y)
    }
}

/// Eager max-pool over the last axis.
pub fn maxpool1d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant_ref(x);
    let y = g.maxpool1d(v, window, stride)?;
    Ok(g.take(y))
}

/// Eager pointwise activation selected by tag.
pub fn activation(tag: &str, x: &Tensor) -> Result<Tensor> {
    let act: Activation = tag.parse()?;
    Ok(x.map(|v| act.apply(v)))
}

/// Eager inverted dropout.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant_ref(x);
    let y = g.dropout(v, p, rng, mode.is_train())?;
    Ok(g.take(y))
}

/// `U(-1/√fan_in, 1/√fan_in)` initialization.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.uniform_vec(n, -bound, bound)).expect("init shape")
}

/// Promotes `[C, W]` to `[1, C, W]`; passes `[N, C, W]` through.
pub(crate) fn batched_input(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?, false)),
        3 => Ok((x.clone(), true)),
        _ => Err(Error::dim("conv1d", format!("input must be [C,W] or [N,C,W], got {:?}", x.shape()))),
    }
}

pub(crate) fn unbatch(y: Tensor, was_batched: bool) -> Result<Tensor> {
    if was_batched {
        Ok(y)
    } else {
        let s = y.shape().to_vec();
        y.reshape(&s[1..])
    }
}
