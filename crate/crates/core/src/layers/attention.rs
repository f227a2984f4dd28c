//! Scaled dot-product and multi-head self-attention.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

use super::fan_in_uniform;

/// `softmax(q kᵀ / √d) v` on `[B, L, d]` (or `[L, d]`) vars.
pub fn attend<'a>(g: &mut Graph<'a>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq != sk || sq != sv || !(2..=3).contains(&sq.len()) {
        return Err(Error::dim("scaled_dot_attention", format!("q {sq:?} k {sk:?} v {sv:?}")));
    }
    let unbatched = sq.len() == 2;
    let (q, k, v) = if unbatched {
        let s3 = [1, sq[0], sq[1]];
        (g.reshape(q, &s3)?, g.reshape(k, &s3)?, g.reshape(v, &s3)?)
    } else {
        (q, k, v)
    };
    let d = *sq.last().expect("rank >= 2") as f64;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax(scores);
    let out = g.bmm(weights, v)?;
    if unbatched {
        g.reshape(out, &sq)
    } else {
        Ok(out)
    }
}

/// Eager single-head attention on `[L, d]` matrices.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant_ref(q), g.constant_ref(k), g.constant_ref(v));
    let out = attend(&mut g, vq, vk, vv)?;
    Ok(g.take(out))
}

/// Row-stochastic weight matrix `softmax(q kᵀ / √d)` for `[L, d]` inputs.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || q.shape() != k.shape() {
        return Err(Error::dim("attention_weights", format!("q {:?} k {:?}", q.shape(), k.shape())));
    }
    let d = q.shape()[1] as f64;
    let mut g = Graph::new();
    let (vq, vk) = (g.constant_ref(q), g.constant_ref(k));
    let kt = g.permute(vk, &[1, 0])?;
    let s = g.matmul(vq, kt)?;
    let s = g.scale(s, 1.0 / d.sqrt());
    let w = g.softmax(s);
    Ok(g.take(w))
}

/// Multi-head self-attention parameters.
///
/// The per-head projections are stored side by side: head `i` owns columns
/// `i*d_head .. (i+1)*d_head` of `w_q`, `w_k` and `w_v` (each
/// `[d_model, d_model]`). `w_o` maps the concatenated heads back to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        check_heads(d, heads)?;
        for (name, t) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v), ("W_O", &w_o)] {
            if t.shape() != [d, d] {
                return Err(Error::dim("multi_head_attention", format!("{name} is {:?}, expected [{d}, {d}]", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads })
    }

    pub fn init(d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(d_model, heads)?;
        let mut m = || fan_in_uniform(&[d_model, d_model], d_model, rng);
        let (w_q, w_k, w_v, w_o) = (m(), m(), m(), m());
        Ok(Self { w_q, w_k, w_v, w_o, heads })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * self.w_q.len()
    }

    /// Columns of `w` belonging to head `i`, as a `[d_model, d_head]` matrix.
    pub fn head_slice(&self, w: &Tensor, i: usize) -> Tensor {
        let (d, dh) = (self.d_model(), self.d_head());
        let data = (0..d)
            .flat_map(|r| w.data()[r * d + i * dh..r * d + (i + 1) * dh].iter().copied())
            .collect();
        Tensor::matrix(d, dh, data).expect("head slice shape")
    }

    /// Self-attention over `x[B, L, d_model]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (d, h) = (self.d_model(), self.heads);
        if s.len() != 3 || s[2] != d {
            return Err(Error::dim("multi_head_attention", format!("input {s:?} for d_model {d}")));
        }
        let (b, l, dh) = (s[0], s[1], self.d_head());
        let flat = g.reshape(x, &[b * l, d])?;
        let split = |w: &'a Tensor, g: &mut Graph<'a>| -> Result<Var> {
            let wv = g.param(w);
            let p = g.matmul(flat, wv)?;
            let p = g.reshape(p, &[b, l, h, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[b * h, l, dh])
        };
        let q = split(&self.w_q, g)?;
        let k = split(&self.w_k, g)?;
        let v = split(&self.w_v, g)?;
        let heads = attend(g, q, k, v)?;
        let heads = g.reshape(heads, &[b, h, l, dh])?;
        let heads = g.permute(heads, &[0, 2, 1, 3])?;
        let concat = g.reshape(heads, &[b * l, d])?;
        let wo = g.param(&self.w_o);
        let out = g.matmul(concat, wo)?;
        g.reshape(out, &[b, l, d])
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} attention heads do not divide d_model = {d_model}"
        )));
    }
    Ok(())
}

/// Eager multi-head self-attention on `x[L, d_model]`.
pub fn multi_head_attention(x: &Tensor, mha: &MultiHeadAttention) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("multi_head_attention", format!("input {:?}", x.shape())));
    }
    let x3 = x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?;
    let mut g = Graph::new();
    let v = g.constant(x3);
    let y = mha.forward(&mut g, v)?;
    g.take(y).reshape(x.shape())
}
