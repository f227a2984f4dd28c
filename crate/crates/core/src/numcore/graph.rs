//! Reverse-mode automatic differentiation over a node arena.
//!
//! A [`Graph`] records every op applied to it. Parameters enter as borrowed
//! leaves via [`Graph::param`]; the same tensor registered twice maps to the
//! same [`Var`]. [`Graph::backward`] walks the arena in reverse creation
//! order (a valid topological order) and returns a [`Gradients`] table. The
//! graph is not consumed: `backward` may be called again, and values stay
//! readable until the graph is dropped.
//!
//! Broadcasting is limited to one-element tensors in the binary ops.

use std::borrow::Cow;
use std::collections::HashMap;

use super::activation::Activation;
use super::kernels::{self, ConvGeom};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Act(Var, Activation),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        wo: usize,
        local: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        dims: (usize, usize, usize),
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm statistics source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'s> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with stored (running) statistics.
    Fixed {
        mean: &'s [f64],
        var: &'s [f64],
        eps: f64,
    },
}

/// Per-channel mean and biased variance of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<usize, Var>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `c[m×n] += a[m×k] · b[k×n]`, optionally with either operand transposed in storage.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                let br = &b[p * n..(p + 1) * n];
                for (cv, &bv) in row.iter_mut().zip(br) {
                    *cv += av * bv;
                }
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf borrowed from the caller. Registering the same tensor twice returns the same var.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Var previously registered for `t` through [`Graph::param`].
    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params.get(&(t as *const Tensor as usize)).copied()
    }

    /// Owned leaf that takes part in differentiation.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Owned leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Borrowed leaf with no gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Owned copy of a node value.
    pub fn take(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.as_ref().clone()
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64>;
        let shape: Vec<usize>;
        if ta.shape() == tb.shape() {
            data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            shape = ta.shape().to_vec();
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            data = ta.data().iter().map(|&x| f(x, y)).collect();
            shape = ta.shape().to_vec();
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            data = tb.data().iter().map(|&y| f(x, y)).collect();
            shape = tb.shape().to_vec();
        } else {
            return Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddConst(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut c, m, k, n, false, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], c)?, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("perm {perm:?} for shape {:?}", t.shape())));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.take(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let t = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, act), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Softmax(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Shared-kernel 1-D convolution: `x[N,Cin,W]`, `w[Cout,Cin,K]`, `b[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, padding, false)
    }

    /// Position-specific 1-D convolution: `w[P,Cout,Cin,K]`, `b[P,Cout]`, `P` = output width.
    pub fn conv1d_local(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, padding, true)
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize, local: bool) -> Result<Var> {
        let name = if local { "conv1d_local" } else { "conv1d_shared" };
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let sx = tx.shape();
        if sx.len() != 3 {
            return Err(Error::dim(name, format!("input must be [N,C,W], got {sx:?}")));
        }
        let sw = tw.shape();
        let (cout, cin, k) = match (local, sw.len()) {
            (false, 3) => (sw[0], sw[1], sw[2]),
            (true, 4) => (sw[1], sw[2], sw[3]),
            _ => return Err(Error::dim(name, format!("kernel shape {sw:?}"))),
        };
        if cin != sx[1] {
            return Err(Error::dim(name, format!("input {sx:?} vs kernel {sw:?}")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: cin,
            width: sx[2],
            out_ch: cout,
            kernel: k,
            stride,
            padding,
        };
        let wo = geom.out_width().ok_or_else(|| {
            Error::dim(
                name,
                format!("width {} with padding {padding} is narrower than kernel {k}", sx[2]),
            )
        })?;
        if local && sw[0] != wo {
            return Err(Error::Config(format!(
                "local kernel bank has {} positions but output width is {wo}",
                sw[0]
            )));
        }
        let want_b: Vec<usize> = if local { vec![wo, cout] } else { vec![cout] };
        if tb.shape() != want_b.as_slice() {
            return Err(Error::dim(name, format!("bias {:?}, expected {want_b:?}", tb.shape())));
        }
        let out = kernels::conv1d_forward(tx.data(), tw.data(), tb.data(), &geom, wo, local);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![geom.batch, cout, wo], out)?,
            Op::Conv1d { x, w, b, geom, wo, local },
            rg,
        ))
    }

    /// Max-pool over the last axis of `[.., W]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let w = *s.last().unwrap_or(&0);
        if window == 0 || stride == 0 {
            return Err(Error::Config(format!("maxpool window {window} stride {stride}")));
        }
        if w < window {
            return Err(Error::dim("maxpool1d", format!("width {w} < window {window}")));
        }
        let rows = t.len() / w;
        let (out, argmax) = kernels::maxpool_forward(t.data(), rows, w, window, stride);
        let mut shape = s.to_vec();
        *shape.last_mut().expect("rank >= 1") = (w - window) / stride + 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Batch normalization of `[N,C,W]` or `[N,C]` with per-channel `gamma`/`beta`.
    /// Returns the batch statistics when normalizing with [`NormStats::Batch`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        let s = t.shape();
        let (n, c, w) = match s.len() {
            2 => (s[0], s[1], 1),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::dim("batchnorm", format!("input must be [N,C] or [N,C,W], got {s:?}"))),
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!("gamma {:?} beta {:?} for {c} channels", tg.shape(), tb.shape()),
            ));
        }
        let (mean, var, eps, train) = match stats {
            NormStats::Batch { eps } => {
                if n * w < 2 {
                    return Err(Error::Contract(format!(
                        "batch-statistics normalization needs at least 2 values per channel, got {}",
                        n * w
                    )));
                }
                let (m, v) = kernels::channel_stats(t.data(), n, c, w);
                (m, v, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batchnorm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        let (g, be) = (tg.data(), tb.data());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * w;
                for i in base..base + w {
                    let h = (t.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + be[ci];
                }
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                dims: (n, c, w),
            },
            rg,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Inverted dropout. Identity when `!train` or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1]")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        if p == 1.0 {
            return Err(Error::Config("dropout rate 1 in training mode".into()));
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg))
    }

    /// `x[N,k] · w[k,m] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || tb.shape() != [sw[1]] {
            return Err(Error::dim(
                "dense",
                format!("x {sx:?}, W {sw:?}, b {:?}", tb.shape()),
            ));
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out: Vec<f64> = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        gemm(tx.data(), tw.data(), &mut out, n, k, m, false, false);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Mean squared error between `pred` and a fixed target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() || target.is_empty() {
            return Err(Error::dim(
                "mse_loss",
                format!("prediction length {} vs target length {}", t.len(), target.len()),
            ));
        }
        let s: f64 = t.data().iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
        let loss = s / target.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of a binary op operand, reducing over the broadcast when the operand is one element.
    fn reduce_to(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(v).len() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.reduce_to(*a, gy.to_vec());
                let gb = self.reduce_to(*b, gy.to_vec());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(*a, gy.to_vec());
                let gb = self.reduce_to(*b, gy.iter().map(|g| -g).collect());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, j: usize| if t.len() == 1 { t.data()[0] } else { t.data()[j] };
                let ga: Vec<f64> = gy.iter().enumerate().map(|(j, g)| g * at(tb, j)).collect();
                let gb: Vec<f64> = gy.iter().enumerate().map(|(j, g)| g * at(ta, j)).collect();
                let ga = self.reduce_to(*a, ga);
                let gb = self.reduce_to(*b, gb);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.iter().map(|g| g * s).collect()),
            Op::AddConst(a) => self.accumulate(grads, *a, gy.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(gy, tb.data(), &mut ga, m, n, k, false, true);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(ta.data(), gy, &mut gb, k, m, n, true, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for s in 0..bs {
                    let gys = &gy[s * m * n..(s + 1) * m * n];
                    gemm(gys, &tb.data()[s * k * n..(s + 1) * k * n], &mut ga[s * m * k..(s + 1) * m * k], m, n, k, false, true);
                    gemm(&ta.data()[s * m * k..(s + 1) * m * k], gys, &mut gb[s * k * n..(s + 1) * k * n], k, m, n, true, false);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (g, _) = permute_data(gy, out.shape(), &inv);
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gy[0] / n as f64; n]);
            }
            Op::Act(x, act) => {
                let tx = self.value(*x);
                let g = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gy)
                    .map(|((&xv, &yv), &g)| g * act.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let w = *out.shape().last().unwrap_or(&1);
                let mut g = vec![0.0; gy.len()];
                for ((gr, yr), dr) in g.chunks_mut(w).zip(out.data().chunks(w)).zip(gy.chunks(w)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for ((gv, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                        *gv = y * (d - dot);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let blk = self.value(p).shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        g.extend_from_slice(&gy[o * total + offset..o * total + offset + blk]);
                    }
                    offset += blk;
                    self.accumulate(grads, p, g);
                }
            }
            Op::Conv1d { x, w, b, geom, wo, local } => {
                if self.nodes[x.0].requires_grad {
                    let gx = kernels::conv1d_backward_input(gy, self.value(*w).data(), geom, *wo, *local);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(&[*w, *b]) {
                    let (gw, gb) = kernels::conv1d_backward_params(gy, self.value(*x).data(), geom, *wo, *local);
                    self.accumulate(grads, *w, gw);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gy) {
                    g[src] += gv;
                }
                self.accumulate(grads, *x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                dims: (n, c, w),
            } => {
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; *c];
                let mut dbeta = vec![0.0; *c];
                for ni in 0..*n {
                    for ci in 0..*c {
                        let base = (ni * c + ci) * w;
                        for j in base..base + w {
                            dgamma[ci] += gy[j] * xhat[j];
                            dbeta[ci] += gy[j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; gy.len()];
                    let m = (n * w) as f64;
                    for ni in 0..*n {
                        for ci in 0..*c {
                            let base = (ni * c + ci) * w;
                            let k = gam[ci] * inv_std[ci];
                            for j in base..base + w {
                                gx[j] = if *train {
                                    k * (gy[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                                } else {
                                    k * gy[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gy.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, k, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; n * k];
                    gemm(gy, tw.data(), &mut gx, n, m, k, false, true);
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![0.0; k * m];
                    gemm(tx.data(), gy, &mut gw, k, n, m, true, false);
                    self.accumulate(grads, *w, gw);
                }
                let mut gb = vec![0.0; m];
                for row in gy.chunks(m) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * gy[0] / target.len() as f64;
                let g = p.data().iter().zip(target).map(|(pv, y)| scale * (pv - y)).collect();
                self.accumulate(grads, *pred, g);
            }
        }
    }
}
