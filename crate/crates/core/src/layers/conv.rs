use crate::error::{Error, Result};
use crate::numcore::kernels::conv_out_width;
use crate::numcore::{Graph, Rng, Tensor, Var};

use super::{batched_input, fan_in_uniform, unbatch};

/// One kernel set slid over every position (cross-correlation, zero padding).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedConv1d {
    /// `[out_ch, in_ch, k]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl SharedConv1d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 3 {
            return Err(Error::dim("conv1d_shared", format!("kernel must be [out,in,k], got {s:?}")));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::dim("conv1d_shared", format!("bias {:?} for {} outputs", bias.shape(), s[0])));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn init(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[out_ch, in_ch, k], in_ch * k, rng),
            bias: fan_in_uniform(&[out_ch], in_ch * k, rng),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_width(&self, width: usize) -> Option<usize> {
        conv_out_width(width, self.kernel_size(), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.conv1d(x, w, b, self.stride, self.padding)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Position-specific ("locally connected") 1-D convolution: a separate
/// kernel set for every output position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConv1d {
    /// `[positions, out_ch, in_ch, k]`
    pub weight: Tensor,
    /// `[positions, out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl LocalConv1d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 {
            return Err(Error::dim("conv1d_local", format!("bank must be [P,out,in,k], got {s:?}")));
        }
        if bias.shape() != [s[0], s[1]] {
            return Err(Error::dim("conv1d_local", format!("bias {:?} for bank {s:?}", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Bank sized for inputs of width `in_width`.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        in_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let positions = conv_out_width(in_width, k, stride, padding).ok_or_else(|| {
            Error::Config(format!("local conv: width {in_width} too small for kernel {k}"))
        })?;
        Ok(Self {
            weight: fan_in_uniform(&[positions, out_ch, in_ch, k], in_ch * k, rng),
            bias: fan_in_uniform(&[positions, out_ch], in_ch * k, rng),
            stride,
            padding,
        })
    }

    /// Every position gets a copy of `shared`'s kernels.
    pub fn tied(shared: &SharedConv1d, positions: usize) -> Self {
        let mut w = Vec::with_capacity(positions * shared.weight.len());
        let mut b = Vec::with_capacity(positions * shared.bias.len());
        for _ in 0..positions {
            w.extend_from_slice(shared.weight.data());
            b.extend_from_slice(shared.bias.data());
        }
        let mut wshape = vec![positions];
        wshape.extend_from_slice(shared.weight.shape());
        Self {
            weight: Tensor::new(wshape, w).expect("tied bank shape"),
            bias: Tensor::new(vec![positions, shared.out_channels()], b).expect("tied bias shape"),
            stride: shared.stride,
            padding: shared.padding,
        }
    }

    pub fn positions(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.conv1d_local(x, w, b, self.stride, self.padding)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Eager shared convolution of `[in_ch, W]` (or batched `[N, in_ch, W]`).
pub fn conv1d_shared(x: &Tensor, p: &SharedConv1d) -> Result<Tensor> {
    let (xb, was_batched) = batched_input(x)?;
    let mut g = Graph::new();
    let v = g.constant(xb);
    let y = p.forward(&mut g, v)?;
    unbatch(g.take(y), was_batched)
}

/// Eager position-specific convolution of `[in_ch, W]` (or batched `[N, in_ch, W]`).
pub fn conv1d_local(x: &Tensor, bank: &LocalConv1d) -> Result<Tensor> {
    let (xb, was_batched) = batched_input(x)?;
    let mut g = Graph::new();
    let v = g.constant(xb);
    let y = bank.forward(&mut g, v)?;
    unbatch(g.take(y), was_batched)
}
