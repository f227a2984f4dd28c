//! Slice-level forward/backward kernels for the heavy layer ops.
//!
//! Layouts: activations are `[batch, channels, width]` row-major. Shared
//! kernels are `[out, in, k]` with bias `[out]`; position-specific banks are
//! `[positions, out, in, k]` with bias `[positions, out]`. Convolutions are
//! cross-correlations with zero padding.

use super::par::{for_each_chunk_mut, map_range};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output width, or `None` when the padded input is narrower than the kernel.
    pub fn out_width(&self) -> Option<usize> {
        conv_out_width(self.width, self.kernel, self.stride, self.padding)
    }

    fn work(&self, wo: usize) -> usize {
        self.batch * self.out_ch * self.in_ch * self.kernel * wo
    }
}

pub fn conv_out_width(width: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = width + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Kernel taps `u` that land inside the input for output position `t`.
#[inline]
fn u_range(t: usize, g: &ConvGeom) -> std::ops::Range<usize> {
    let base = t * g.stride;
    let lo = g.padding.saturating_sub(base);
    let hi = (g.width + g.padding).saturating_sub(base).min(g.kernel);
    lo..hi.max(lo)
}

/// Output positions `t` whose tap `u` lands inside the input.
#[inline]
fn t_range(u: usize, g: &ConvGeom, wo: usize) -> std::ops::Range<usize> {
    let lo = if g.padding > u { (g.padding - u).div_ceil(g.stride) } else { 0 };
    let hi = if g.width + g.padding > u {
        ((g.width - 1 + g.padding - u) / g.stride + 1).min(wo)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// `row[t] += wv * x[t*stride + u - padding]` over the valid `t`.
#[inline]
fn axpy_taps(row: &mut [f64], xr: &[f64], wv: f64, u: usize, g: &ConvGeom, wo: usize) {
    let ts = t_range(u, g, wo);
    if ts.is_empty() {
        return;
    }
    let first = ts.start * g.stride + u - g.padding;
    if g.stride == 1 {
        for (r, &xv) in row[ts.clone()].iter_mut().zip(&xr[first..first + ts.len()]) {
            *r += wv * xv;
        }
    } else {
        for (j, r) in row[ts].iter_mut().enumerate() {
            *r += wv * xr[first + j * g.stride];
        }
    }
}

/// `Σ_t a[t] * x[t*stride + u - padding]` over the valid `t`.
#[inline]
fn dot_taps(a: &[f64], xr: &[f64], u: usize, g: &ConvGeom, wo: usize) -> f64 {
    let ts = t_range(u, g, wo);
    if ts.is_empty() {
        return 0.0;
    }
    let first = ts.start * g.stride + u - g.padding;
    if g.stride == 1 {
        a[ts.clone()].iter().zip(&xr[first..first + ts.len()]).map(|(p, q)| p * q).sum()
    } else {
        a[ts].iter().enumerate().map(|(j, p)| p * xr[first + j * g.stride]).sum()
    }
}

/// Shared-weight 1-D convolution. `local = true` switches to one kernel per output position.
pub fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, wo: usize, local: bool) -> Vec<f64> {
    let (cin, k, cout, wi) = (g.in_ch, g.kernel, g.out_ch, g.width);
    let mut out = vec![0.0; g.batch * cout * wo];
    for_each_chunk_mut(&mut out, cout * wo, g.work(wo), |n, o_n| {
        let x_n = &x[n * cin * wi..(n + 1) * cin * wi];
        if local {
            for t in 0..wo {
                let us = u_range(t, g);
                let x0 = t * g.stride;
                for o in 0..cout {
                    let wbase = (t * cout + o) * cin * k;
                    let mut acc = b[t * cout + o];
                    for c in 0..cin {
                        let wr = &w[wbase + c * k..wbase + (c + 1) * k];
                        let xr = &x_n[c * wi..(c + 1) * wi];
                        for u in us.clone() {
                            acc += xr[x0 + u - g.padding] * wr[u];
                        }
                    }
                    o_n[o * wo + t] = acc;
                }
            }
        } else {
            for o in 0..cout {
                let row = &mut o_n[o * wo..(o + 1) * wo];
                row.fill(b[o]);
                for c in 0..cin {
                    let xr = &x_n[c * wi..(c + 1) * wi];
                    for u in 0..k {
                        axpy_taps(row, xr, w[(o * cin + c) * k + u], u, g, wo);
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub fn conv1d_backward_input(dy: &[f64], w: &[f64], g: &ConvGeom, wo: usize, local: bool) -> Vec<f64> {
    let (cin, k, cout, wi) = (g.in_ch, g.kernel, g.out_ch, g.width);
    let mut dx = vec![0.0; g.batch * cin * wi];
    for_each_chunk_mut(&mut dx, cin * wi, g.work(wo), |n, dx_n| {
        let dy_n = &dy[n * cout * wo..(n + 1) * cout * wo];
        if local {
            for t in 0..wo {
                let us = u_range(t, g);
                let x0 = t * g.stride;
                for o in 0..cout {
                    let gy = dy_n[o * wo + t];
                    if gy == 0.0 {
                        continue;
                    }
                    let wbase = (t * cout + o) * cin * k;
                    for c in 0..cin {
                        let wr = &w[wbase + c * k..wbase + (c + 1) * k];
                        let dr = &mut dx_n[c * wi..(c + 1) * wi];
                        for u in us.clone() {
                            dr[x0 + u - g.padding] += gy * wr[u];
                        }
                    }
                }
            }
        } else {
            for o in 0..cout {
                let dy_no = &dy_n[o * wo..(o + 1) * wo];
                for c in 0..cin {
                    let dr = &mut dx_n[c * wi..(c + 1) * wi];
                    for u in 0..k {
                        let wv = w[(o * cin + c) * k + u];
                        let ts = t_range(u, g, wo);
                        if ts.is_empty() {
                            continue;
                        }
                        let first = ts.start * g.stride + u - g.padding;
                        for (j, &gy) in dy_no[ts].iter().enumerate() {
                            dr[first + j * g.stride] += gy * wv;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradients with respect to kernels and bias, `(dw, db)`.
pub fn conv1d_backward_params(
    dy: &[f64],
    x: &[f64],
    g: &ConvGeom,
    wo: usize,
    local: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (cin, k, cout, wi) = (g.in_ch, g.kernel, g.out_ch, g.width);
    let slab = cin * k;
    if local {
        // One independent kernel per (position, out channel): reduce over the batch only.
        let parts = map_range(wo * cout, g.work(wo), |pos_o| {
            let (t, o) = (pos_o / cout, pos_o % cout);
            let us = u_range(t, g);
            let x0 = t * g.stride;
            let mut dw = vec![0.0; slab];
            let mut db = 0.0;
            for n in 0..g.batch {
                let gy = dy[(n * cout + o) * wo + t];
                db += gy;
                if gy == 0.0 {
                    continue;
                }
                let x_n = &x[n * cin * wi..(n + 1) * cin * wi];
                for c in 0..cin {
                    let xr = &x_n[c * wi..(c + 1) * wi];
                    for u in us.clone() {
                        dw[c * k + u] += gy * xr[x0 + u - g.padding];
                    }
                }
            }
            (dw, db)
        });
        let mut dw = Vec::with_capacity(wo * cout * slab);
        let mut db = Vec::with_capacity(wo * cout);
        for (w_part, b_part) in parts {
            dw.extend_from_slice(&w_part);
            db.push(b_part);
        }
        (dw, db)
    } else {
        let parts = map_range(cout, g.work(wo), |o| {
            let mut dw = vec![0.0; slab];
            let mut db = 0.0;
            for n in 0..g.batch {
                let dy_no = &dy[(n * cout + o) * wo..(n * cout + o + 1) * wo];
                db += dy_no.iter().sum::<f64>();
                let x_n = &x[n * cin * wi..(n + 1) * cin * wi];
                for c in 0..cin {
                    let xr = &x_n[c * wi..(c + 1) * wi];
                    for u in 0..k {
                        dw[c * k + u] += dot_taps(dy_no, xr, u, g, wo);
                    }
                }
            }
            (dw, db)
        });
        let mut dw = Vec::with_capacity(cout * slab);
        let mut db = Vec::with_capacity(cout);
        for (w_part, b_part) in parts {
            dw.extend_from_slice(&w_part);
            db.push(b_part);
        }
        (dw, db)
    }
}

/// Max-pool over the last axis of `[rows, width]`; returns values and flat argmax indices.
/// Ties go to the first maximal element.
pub fn maxpool_forward(x: &[f64], rows: usize, width: usize, window: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let wo = (width - window) / stride + 1;
    let mut out = Vec::with_capacity(rows * wo);
    let mut arg = Vec::with_capacity(rows * wo);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        for t in 0..wo {
            let start = t * stride;
            let mut best = start;
            for i in start + 1..start + window {
                if row[i] > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            arg.push(r * width + best);
        }
    }
    (out, arg)
}

/// Per-channel statistics of `[batch, ch, width]` over batch and width (biased variance).
pub fn channel_stats(x: &[f64], batch: usize, ch: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * width) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for n in 0..batch {
            s += x[(n * ch + c) * width..(n * ch + c + 1) * width].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for n in 0..batch {
            q += x[(n * ch + c) * width..(n * ch + c + 1) * width]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = q / m;
    }
    (mean, var)
}
