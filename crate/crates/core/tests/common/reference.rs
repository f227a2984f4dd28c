//! Brute-force implementations written from the definitions, independent of
//! the library kernels.

use menglan::numcore::Tensor;

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `x[c, pos]` of a `[C, w]` map, zero outside.
pub fn tap(x: &[f64], w: usize, c: usize, pos: isize) -> f64 {
    if pos < 0 || pos as usize >= w {
        0.0
    } else {
        x[c * w + pos as usize]
    }
}

/// Shared-kernel cross-correlation of `[cin, w]` with `[cout, cin, k]`.
pub fn conv_shared(x: &[f64], w: usize, weight: &[f64], bias: &[f64], cin: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let cout = bias.len();
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * wo];
    for o in 0..cout {
        for q in 0..wo {
            let mut s = bias[o];
            for c in 0..cin {
                for u in 0..k {
                    let pos = (q * stride + u) as isize - pad as isize;
                    s += tap(x, w, c, pos) * weight[(o * cin + c) * k + u];
                }
            }
            out[o * wo + q] = s;
        }
    }
    out
}

/// Position-specific kernels `[wo, cout, cin, k]`, biases `[wo, cout]`.
pub fn conv_local(x: &[f64], w: usize, weight: &[f64], bias: &[f64], cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * wo];
    for p in 0..wo {
        for o in 0..cout {
            let mut s = bias[p * cout + o];
            for u in 0..k {
                for c in 0..cin {
                    let pos = (p * stride + u) as isize - pad as isize;
                    s += tap(x, w, c, pos) * weight[((p * cout + o) * cin + c) * k + u];
                }
            }
            out[o * wo + p] = s;
        }
    }
    out
}

pub fn maxpool(x: &[f64], ch: usize, w: usize, win: usize, stride: usize) -> Vec<f64> {
    let wo = (w - win) / stride + 1;
    let mut out = Vec::with_capacity(ch * wo);
    for c in 0..ch {
        for q in 0..wo {
            let mut m = f64::NEG_INFINITY;
            for u in 0..win {
                m = m.max(x[c * w + q * stride + u]);
            }
            out.push(m);
        }
    }
    out
}

pub fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// softmax(q kᵀ / √d) v with explicit loops.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            s[i * l + j] = (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt();
        }
    }
    softmax_rows(&mut s, l);
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for t in 0..d {
            out[i * d + t] = (0..l).map(|j| s[i * l + j] * v[j * d + t]).sum();
        }
    }
    out
}

/// Per-head attention over column slices of the projections, concatenated, then `w_o`.
pub fn multi_head(x: &[f64], wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, l: usize, d: usize, h: usize) -> Vec<f64> {
    let dh = d / h;
    let cols = |w: &Tensor, i: usize| -> Vec<f64> {
        let mut s = Vec::with_capacity(d * dh);
        for r in 0..d {
            s.extend_from_slice(&w.data()[r * d + i * dh..r * d + (i + 1) * dh]);
        }
        s
    };
    let mut concat = vec![0.0; l * d];
    for i in 0..h {
        let proj = |w: &Tensor| naive_matmul(x, &cols(w, i), l, d, dh);
        let head = attention(&proj(wq), &proj(wk), &proj(wv), l, dh);
        for r in 0..l {
            concat[r * d + i * dh..r * d + (i + 1) * dh].copy_from_slice(&head[r * dh..(r + 1) * dh]);
        }
    }
    naive_matmul(&concat, wo.data(), l, d, d)
}

/// `(rmse, mse, mae, r2)` from the textbook formulas.
pub fn regression_metrics(y: &[f64], p: &[f64]) -> (f64, f64, f64, f64) {
    let n = y.len() as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for i in 0..y.len() {
        sq += (y[i] - p[i]).powi(2);
        ab += (y[i] - p[i]).abs();
    }
    let mean = y.iter().sum::<f64>() / n;
    let tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    ((sq / n).sqrt(), sq / n, ab / n, 1.0 - sq / tot)
}

/// Textbook Adam with decoupled weight decay on a flat vector.
pub struct RefAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl RefAdam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - f64::powi(b1, self.t));
            let vh = self.v[i] / (1.0 - f64::powi(b2, self.t));
            x[i] = x[i] - lr * mh / (vh.sqrt() + eps) - lr * wd * x[i];
        }
    }
}
