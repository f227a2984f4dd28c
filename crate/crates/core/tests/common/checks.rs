//! Whole-property checks shared by the topic tests and the acceptance run.
//! Each returns `Ok(summary)` or `Err(what failed)`.

use std::time::Instant;

use menglan::data::{split, split_chronological, SplitIndex};
use menglan::layers::{
    attend, batchnorm, conv1d_local, conv1d_shared, maxpool1d, multi_head_attention, scaled_dot_attention,
    BatchNormState, LocalConv1d, Mode, MultiHeadAttention, SharedConv1d,
};
use menglan::model::{build_model, frm_forward, hmha_forward, Arch, FrmParams, MenglanModel, ModelConfig};
use menglan::numcore::{matmul, Activation, Graph, NormStats, Rng, Tensor};
use menglan::trainer::{adam_step, evaluate_mse, metrics, train, train_step, AdamConfig, AdamState, DecayMode, TrainConfig};

use super::reference as oracle;
use super::{model_gradcheck, op_gradcheck, random_tensor, TOL};

pub type Check = Result<String, String>;

pub const EXACT: f64 = 1e-12;
pub const TRIALS: u64 = 100;

fn gate(label: &str, worst: f64, tol: f64) -> Check {
    if worst <= tol {
        Ok(format!("{label}: worst {worst:.2e} <= {tol:.0e}"))
    } else {
        Err(format!("{label}: worst {worst:.3e} > {tol:.0e}"))
    }
}

// ---------------------------------------------------------------- gradients

/// Values kept away from the kinks of relu, maxpool and softsign.
fn smooth_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = (*v).signum() * (0.1 + v.abs()) + 1e-3 * i as f64;
    }
    t
}

/// Worst relative error of every differentiable op against central differences.
pub fn layer_gradients() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut rng = Rng::new(1);
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    push("matmul", op_gradcheck(&[a, b], |g, v| g.matmul(v[0], v[1]).unwrap()));
    let a = random_tensor(&mut rng, &[2, 3, 4]);
    let b = random_tensor(&mut rng, &[2, 4, 5]);
    push("bmm", op_gradcheck(&[a, b], |g, v| g.bmm(v[0], v[1]).unwrap()));

    let a = random_tensor(&mut rng, &[2, 3]);
    let b = random_tensor(&mut rng, &[2, 3]);
    let s = random_tensor(&mut rng, &[1]);
    push("add", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    push("sub", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    push("mul", op_gradcheck(&[a.clone(), b], |g, v| g.mul(v[0], v[1]).unwrap()));
    push("scalar mul", op_gradcheck(&[a.clone(), s], |g, v| g.mul(v[0], v[1]).unwrap()));
    push("scale", op_gradcheck(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5)));
    push("add_const", op_gradcheck(std::slice::from_ref(&a), |g, v| g.add_const(v[0], 0.7)));
    push("sum", op_gradcheck(std::slice::from_ref(&a), |g, v| g.sum(v[0])));
    push("mean", op_gradcheck(&[a], |g, v| g.mean(v[0])));

    let x = smooth_tensor(&mut rng, &[3, 5]);
    for act in Activation::ALL {
        push(act.name(), op_gradcheck(std::slice::from_ref(&x), |g, v| g.activation(v[0], act)));
    }
    push("softmax", op_gradcheck(&[x], |g, v| g.softmax(v[0])));

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let y = random_tensor(&mut rng, &[2, 2, 4]);
    push("permute", op_gradcheck(std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    push("reshape", op_gradcheck(std::slice::from_ref(&x), |g, v| g.reshape(v[0], &[6, 4]).unwrap()));
    push("concat", op_gradcheck(&[x, y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()));

    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random_tensor(&mut rng, &[2, 3, 9]);
        let w = random_tensor(&mut rng, &[4, 3, 3]);
        let b = random_tensor(&mut rng, &[4]);
        let e = op_gradcheck(&[x.clone(), w, b], move |g, v| g.conv1d(v[0], v[1], v[2], stride, pad).unwrap());
        push(&format!("conv1d_shared s{stride} p{pad}"), e);
        let wo = (9 + 2 * pad - 3) / stride + 1;
        let wl = random_tensor(&mut rng, &[wo, 4, 3, 3]);
        let bl = random_tensor(&mut rng, &[wo, 4]);
        let e = op_gradcheck(&[x, wl, bl], move |g, v| g.conv1d_local(v[0], v[1], v[2], stride, pad).unwrap());
        push(&format!("conv1d_local s{stride} p{pad}"), e);
    }

    let x = smooth_tensor(&mut rng, &[2, 3, 8]);
    push("maxpool 2/2", op_gradcheck(std::slice::from_ref(&x), |g, v| g.maxpool1d(v[0], 2, 2).unwrap()));
    push("maxpool 3/1", op_gradcheck(&[x], |g, v| g.maxpool1d(v[0], 3, 1).unwrap()));

    let x = random_tensor(&mut rng, &[3, 2, 4]);
    let gamma = random_tensor(&mut rng, &[2]);
    let beta = random_tensor(&mut rng, &[2]);
    push(
        "batchnorm train",
        op_gradcheck(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 }).unwrap().0
        }),
    );
    push(
        "batchnorm inference",
        op_gradcheck(&[x, gamma, beta], |g, v| {
            let stats = NormStats::Fixed { mean: &[0.3, -0.2], var: &[0.5, 2.0], eps: 1e-5 };
            g.batch_norm(v[0], v[1], v[2], stats).unwrap().0
        }),
    );

    let x = random_tensor(&mut rng, &[4, 5]);
    push("dropout", op_gradcheck(&[x], |g, v| g.dropout(v[0], 0.3, &mut Rng::new(77), true).unwrap()));

    let x = random_tensor(&mut rng, &[3, 4]);
    let w = random_tensor(&mut rng, &[4, 2]);
    let b = random_tensor(&mut rng, &[2]);
    push("dense", op_gradcheck(&[x, w, b], |g, v| g.linear(v[0], v[1], v[2]).unwrap()));
    let p = random_tensor(&mut rng, &[5]);
    let target = rng.uniform_vec(5, -1.0, 1.0);
    push("mse", op_gradcheck(&[p], move |g, v| g.mse(v[0], &target).unwrap()));

    let q = random_tensor(&mut rng, &[4, 3]);
    let k = random_tensor(&mut rng, &[4, 3]);
    let v = random_tensor(&mut rng, &[4, 3]);
    push("scaled_dot_attention", op_gradcheck(&[q, k, v], |g, v| attend(g, v[0], v[1], v[2]).unwrap()));

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let mut inputs = vec![x];
    inputs.extend((0..4).map(|_| random_tensor(&mut rng, &[4, 4])));
    push(
        "multi_head_attention projections",
        op_gradcheck(&inputs, |g: &mut Graph<'static>, v| {
            let (b, l, d, h) = (2, 3, 4, 2);
            let dh = d / h;
            let flat = g.reshape(v[0], &[b * l, d]).unwrap();
            let heads: Vec<_> = (1..4)
                .map(|i| {
                    let p = g.matmul(flat, v[i]).unwrap();
                    let p = g.reshape(p, &[b, l, h, dh]).unwrap();
                    let p = g.permute(p, &[0, 2, 1, 3]).unwrap();
                    g.reshape(p, &[b * h, l, dh]).unwrap()
                })
                .collect();
            let a = attend(g, heads[0], heads[1], heads[2]).unwrap();
            let a = g.reshape(a, &[b, h, l, dh]).unwrap();
            let a = g.permute(a, &[0, 2, 1, 3]).unwrap();
            let a = g.reshape(a, &[b * l, d]).unwrap();
            g.matmul(a, v[4]).unwrap()
        }),
    );
    let mha: &'static MultiHeadAttention = Box::leak(Box::new(MultiHeadAttention::init(4, 2, &mut rng).unwrap()));
    let x = random_tensor(&mut rng, &[2, 3, 4]);
    push("multi_head_attention layer", op_gradcheck(&[x], |g, v| mha.forward(g, v[0]).unwrap()));
    out
}

/// Parameter gradients of whole tiny models (full, ablated, baselines, each activation).
pub fn model_gradients() -> Vec<(String, f64)> {
    let tiny = ModelConfig::tiny();
    let mut cfgs = vec![("menglan".to_string(), tiny.clone())];
    for (frm, hmha) in [(false, true), (true, false), (false, false)] {
        cfgs.push((format!("menglan frm={frm} hmha={hmha}"), ModelConfig { use_frm: frm, use_hmha: hmha, ..tiny.clone() }));
    }
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softsign] {
        cfgs.push((format!("menglan {}", act.name()), ModelConfig { activation: act, ..tiny.clone() }));
    }
    cfgs.push(("ann".into(), ModelConfig { arch: Arch::Ann, ..tiny.clone() }));
    cfgs.push(("cnn".into(), ModelConfig { arch: Arch::Cnn, ..tiny }));
    cfgs.into_iter()
        .map(|(name, cfg)| {
            let mut rng = Rng::new(99);
            let mut model = build_model(&cfg).unwrap();
            let x = random_tensor(&mut rng, &[3, cfg.input_channels, cfg.window_width]);
            let y = rng.uniform_vec(3, -1.0, 1.0);
            let (err, at) = model_gradcheck(model.as_mut(), &x, &y);
            (format!("{name} ({at})"), err)
        })
        .collect()
}

pub fn summarize_gradients(results: &[(String, f64)]) -> Check {
    let bad: Vec<String> = results.iter().filter(|(_, e)| !(*e < TOL)).map(|(n, e)| format!("{n}: {e:.3e}")).collect();
    if !bad.is_empty() {
        return Err(format!("relative error >= {TOL:.0e}: {}", bad.join("; ")));
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.2e} < {TOL:.0e}", results.len()))
}

// ---------------------------------------------------------------- oracles

pub fn oracle_matmul(trials: u64) -> f64 {
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, k, n) = (1 + rng.below(6), 1 + rng.below(8), 1 + rng.below(5));
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        worst = worst.max(oracle::max_diff(c.data(), &oracle::naive_matmul(a.data(), b.data(), m, k, n)));
    }
    worst
}

pub fn oracle_conv_shared(trials: u64) -> f64 {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (cin, cout, w) = (1 + rng.below(4), 1 + rng.below(8), 8 + rng.below(30));
        let (k, stride, pad) = (1 + rng.below(5), 1 + rng.below(3), rng.below(3));
        let x = random_tensor(&mut rng, &[cin, w]);
        let p = SharedConv1d::new(random_tensor(&mut rng, &[cout, cin, k]), random_tensor(&mut rng, &[cout]), stride, pad).unwrap();
        let y = conv1d_shared(&x, &p).unwrap();
        let want = oracle::conv_shared(x.data(), w, p.weight.data(), p.bias.data(), cin, k, stride, pad);
        worst = worst.max(oracle::max_diff(y.data(), &want));
    }
    worst
}

pub fn oracle_conv_local(trials: u64) -> f64 {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (cin, cout, w) = (1 + rng.below(4), 1 + rng.below(5), 6 + rng.below(20));
        let (k, stride, pad) = (1 + rng.below(4), 1 + rng.below(2), rng.below(2));
        let wo = (w + 2 * pad - k) / stride + 1;
        let x = random_tensor(&mut rng, &[cin, w]);
        let bank = LocalConv1d::new(random_tensor(&mut rng, &[wo, cout, cin, k]), random_tensor(&mut rng, &[wo, cout]), stride, pad).unwrap();
        let y = conv1d_local(&x, &bank).unwrap();
        let want = oracle::conv_local(x.data(), w, bank.weight.data(), bank.bias.data(), cin, cout, k, stride, pad);
        worst = worst.max(oracle::max_diff(y.data(), &want));
    }
    worst
}

/// Local convolution with the same kernel at every position against the shared convolution.
pub fn tied_kernel_reduction(trials: u64) -> f64 {
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (cin, cout, w) = (1 + rng.below(4), 1 + rng.below(6), 5 + rng.below(25));
        let (k, stride, pad) = (1 + rng.below(4), 1 + rng.below(2), rng.below(2));
        let x = random_tensor(&mut rng, &[cin, w]);
        let shared = SharedConv1d::new(random_tensor(&mut rng, &[cout, cin, k]), random_tensor(&mut rng, &[cout]), stride, pad).unwrap();
        let wo = shared.out_width(w).unwrap();
        let a = conv1d_shared(&x, &shared).unwrap();
        let b = conv1d_local(&x, &LocalConv1d::tied(&shared, wo)).unwrap();
        worst = worst.max(oracle::max_diff(a.data(), b.data()));
    }
    worst
}

pub fn oracle_maxpool(trials: u64) -> f64 {
    let mut rng = Rng::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (ch, w) = (1 + rng.below(4), 4 + rng.below(30));
        let (win, stride) = (1 + rng.below(4), 1 + rng.below(3));
        let x = random_tensor(&mut rng, &[ch, w]);
        let y = maxpool1d(&x, win, stride).unwrap();
        worst = worst.max(oracle::max_diff(y.data(), &oracle::maxpool(x.data(), ch, w, win, stride)));
    }
    worst
}

pub fn oracle_attention(trials: u64) -> f64 {
    let mut rng = Rng::new(6);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (l, d) = (1 + rng.below(8), 1 + rng.below(6));
        let q = random_tensor(&mut rng, &[l, d]);
        let k = random_tensor(&mut rng, &[l, d]);
        let v = random_tensor(&mut rng, &[l, d]);
        let y = scaled_dot_attention(&q, &k, &v).unwrap();
        worst = worst.max(oracle::max_diff(y.data(), &oracle::attention(q.data(), k.data(), v.data(), l, d)));
    }
    worst
}

pub fn oracle_multi_head(trials: u64) -> f64 {
    let mut rng = Rng::new(7);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (l, h, dh) = (1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(3));
        let d = h * dh;
        let x = random_tensor(&mut rng, &[l, d]);
        let w: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[d, d])).collect();
        let mha = MultiHeadAttention::new(w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone(), h).unwrap();
        let y = multi_head_attention(&x, &mha).unwrap();
        let want = oracle::multi_head(x.data(), &w[0], &w[1], &w[2], &w[3], l, d, h);
        worst = worst.max(oracle::max_diff(y.data(), &want));
    }
    worst
}

pub fn oracle_metrics(trials: u64) -> f64 {
    let mut rng = Rng::new(9);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 2 + rng.below(50);
        let y = rng.uniform_vec(n, -5.0, 5.0);
        let p = rng.uniform_vec(n, -5.0, 5.0);
        let m = metrics(&y, &p, 1.5).unwrap();
        let (rmse, mse, mae, r2) = oracle::regression_metrics(&y, &p);
        worst = worst.max(oracle::max_diff(&[m.rmse, m.mse, m.mae, m.r2], &[rmse, mse, mae, r2]));
    }
    worst
}

pub fn oracle_adam(trials: u64) -> f64 {
    let mut rng = Rng::new(10);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 1 + rng.below(20);
        let wd = if rng.below(2) == 0 { 0.0 } else { 0.08 };
        let cfg = AdamConfig { decay: wd, decay_mode: DecayMode::Weight, ..AdamConfig::default() };
        let mut p = Tensor::vector(rng.uniform_vec(n, -2.0, 2.0));
        let mut xr = p.data().to_vec();
        let mut st = AdamState::new(cfg, &[n]);
        let mut r = oracle::RefAdam::new(n);
        for _ in 0..5 {
            let g = rng.uniform_vec(n, -3.0, 3.0);
            adam_step(&mut st, &[], &mut [&mut p], &[Some(&Tensor::vector(g.clone()))]).unwrap();
            r.step(&mut xr, &g, 0.01, wd);
        }
        worst = worst.max(oracle::max_diff(p.data(), &xr));
    }
    worst
}

/// Every op/reference pair at [`TRIALS`] instances each.
pub fn oracle_suite(trials: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv1d_shared", oracle_conv_shared(trials)),
        ("conv1d_local", oracle_conv_local(trials)),
        ("maxpool1d", oracle_maxpool(trials)),
        ("scaled_dot_attention", oracle_attention(trials)),
        ("multi_head_attention", oracle_multi_head(trials)),
        ("metrics", oracle_metrics(trials)),
        ("adam_step", oracle_adam(trials)),
        ("matmul", oracle_matmul(trials)),
    ]
}

pub fn summarize_oracles(results: &[(&str, f64)]) -> Check {
    let bad: Vec<String> = results.iter().filter(|(_, e)| !(*e <= EXACT)).map(|(n, e)| format!("{n}: {e:.3e}")).collect();
    if !bad.is_empty() {
        return Err(format!("difference > {EXACT:.0e}: {}", bad.join("; ")));
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("{} ops, worst difference {worst:.2e} <= {EXACT:.0e}", results.len()))
}

pub fn tied_kernel(trials: u64) -> Check {
    gate(&format!("{trials} trials"), tied_kernel_reduction(trials), EXACT)
}

// ---------------------------------------------------------------- FRM, batch norm, ablations

fn zero_frm(ch: usize, cfg: &ModelConfig) -> FrmParams {
    let mut frm = FrmParams::init(ch, cfg, &mut Rng::new(0)).unwrap();
    for t in [&mut frm.conv1.weight, &mut frm.conv1.bias, &mut frm.conv2.weight, &mut frm.conv2.bias] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    frm
}

/// Conv → BN → conv → BN with explicit statistics, returning `(branch, rFeature)`.
pub fn reference_frm(frm: &FrmParams, f: &Tensor, train: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, c, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let norm = |x: &[f64], bn: &BatchNormState| -> Vec<f64> {
        let mut out = x.to_vec();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| x[(i * c + ch) * w..(i * c + ch + 1) * w].to_vec()).collect();
            let (mean, var) = if train {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
            } else {
                (bn.running_mean[ch], bn.running_var[ch])
            };
            for i in 0..n {
                for t in 0..w {
                    let k = (i * c + ch) * w + t;
                    out[k] = bn.gamma.data()[ch] * (x[k] - mean) / (var + bn.eps).sqrt() + bn.beta.data()[ch];
                }
            }
        }
        out
    };
    let conv = |x: &[f64], p: &SharedConv1d| -> Vec<f64> {
        let k = p.weight.shape()[2];
        (0..n)
            .flat_map(|i| oracle::conv_shared(&x[i * c * w..(i + 1) * c * w], w, p.weight.data(), p.bias.data(), c, k, 1, k / 2))
            .collect()
    };
    let b1 = norm(&conv(f.data(), &frm.conv1), &frm.bn1);
    let b2 = norm(&conv(&b1, &frm.conv2), &frm.bn2);
    let r = b2.iter().zip(f.data()).map(|(a, b)| a + b).collect();
    (b2, r)
}

pub fn frm_identity() -> Check {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(1);
    let f = random_tensor(&mut rng, &[4, 8, 4]);
    let r = frm_forward(&mut zero_frm(8, &cfg), &f, Mode::Train).map_err(|e| e.to_string())?;
    if r.data() != f.data() {
        return Err("zero-kernel FRM output differs from its input".into());
    }

    let f = random_tensor(&mut rng, &[3, 8, 5]);
    let mut frm = FrmParams::init(8, &cfg, &mut rng).unwrap();
    for bn in [&mut frm.bn1, &mut frm.bn2] {
        bn.gamma = random_tensor(&mut rng, &[8]);
        bn.beta = random_tensor(&mut rng, &[8]);
        bn.running_mean = rng.uniform_vec(8, -0.5, 0.5);
        bn.running_var = rng.uniform_vec(8, 0.5, 2.0);
    }
    let mut worst: f64 = 0.0;
    for (mode, train) in [(Mode::Inference, false), (Mode::Train, true)] {
        let (branch, want) = reference_frm(&frm, &f, train);
        let got = frm_forward(&mut frm.clone(), &f, mode).map_err(|e| e.to_string())?;
        worst = worst.max(oracle::max_diff(got.data(), &want));
        let resid: Vec<f64> = got.data().iter().zip(&branch).map(|(r, b)| r - b).collect();
        worst = worst.max(oracle::max_diff(&resid, f.data()));
    }
    gate("zero kernels exact; random parameters vs reference and residual", worst, 1e-10)
}

pub fn batchnorm_semantics() -> Check {
    let mut rng = Rng::new(3);
    let eps = 1e-5;
    let (n, c, w) = (4, 3, 6);
    let x = Tensor::new(vec![n, c, w], rng.uniform_vec(n * c * w, -3.0, 5.0)).unwrap();
    let mut bn = BatchNormState::new(c, 0.1, eps).unwrap();
    let y = batchnorm(&x, &mut bn, Mode::Train).map_err(|e| e.to_string())?;
    let channel = |t: &Tensor, ch: usize| -> Vec<f64> { (0..n).flat_map(|i| t.data()[(i * c + ch) * w..(i * c + ch + 1) * w].to_vec()).collect() };
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    let mut worst_mean: f64 = 0.0;
    for ch in 0..c {
        let (m, v) = moments(&channel(&y, ch));
        let (_, rv) = moments(&channel(&x, ch));
        worst_mean = worst_mean.max(m.abs());
        if m.abs() >= 1e-10 {
            return Err(format!("channel {ch} mean {m:e}"));
        }
        if (v - 1.0).abs() > eps / (rv + eps) + 1e-12 {
            return Err(format!("channel {ch} variance {v} outside the eps bound"));
        }
    }
    let frozen = bn.clone();
    let yi = batchnorm(&x, &mut bn, Mode::Inference).map_err(|e| e.to_string())?;
    if bn != frozen {
        return Err("inference mode mutated the batch-norm state".into());
    }
    let mean0 = bn.running_mean[0];
    let want0: Vec<f64> = channel(&x, 0).iter().map(|v| (v - mean0) / (bn.running_var[0] + eps).sqrt()).collect();
    if oracle::max_diff(&channel(&yi, 0), &want0) > 1e-12 {
        return Err("inference output does not use the running statistics".into());
    }
    let gap = yi.max_abs_diff(&y).unwrap();
    if gap <= 1e-3 {
        return Err(format!("train and inference outputs agree (gap {gap:e}) although statistics differ"));
    }
    Ok(format!("worst train mean {worst_mean:.1e}; inference pure; train/inference gap {gap:.3}"))
}

pub fn ablation_soundness() -> Check {
    let cfg = ModelConfig { use_hmha: false, ..ModelConfig::tiny() };
    let m = MenglanModel::build(&cfg, &mut Rng::new(cfg.seed)).unwrap();
    let r = random_tensor(&mut Rng::new(4), &[8, 4]);
    let out = hmha_forward(&m, &r).map_err(|e| e.to_string())?;
    if !(out.shape() == r.shape() && out.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits())) {
        return Err("use_hmha=false is not a bitwise pass-through".into());
    }

    let cfg = ModelConfig { use_frm: false, ..ModelConfig::tiny() };
    let mut m = build_model(&cfg).unwrap();
    let frm_ids: Vec<usize> = m.named_params().iter().enumerate().filter(|(_, (n, _))| n.starts_with("frm.")).map(|(i, _)| i).collect();
    if frm_ids.is_empty() {
        return Err("no FRM parameters found".into());
    }
    let before: Vec<Tensor> = frm_ids.iter().map(|&i| m.named_params()[i].1.clone()).collect();
    let mut rng = Rng::new(5);
    let x = random_tensor(&mut rng, &[6, cfg.input_channels, cfg.window_width]);
    let y = rng.uniform_vec(6, -1.0, 1.0);
    let mut st = AdamState::new(AdamConfig { decay: 0.0, ..AdamConfig::default() }, &m.named_params().iter().map(|(_, t)| t.len()).collect::<Vec<_>>());
    train_step(m.as_mut(), &mut st, &x, &y, &mut Rng::new(6)).map_err(|e| e.to_string())?;
    let params = m.named_params();
    for (k, &i) in frm_ids.iter().enumerate() {
        // A zero gradient leaves both Adam moments at zero.
        if st.m[i].iter().chain(&st.v[i]).any(|&v| v != 0.0) {
            return Err(format!("{} received a nonzero gradient", params[i].0));
        }
        if params[i].1 != &before[k] {
            return Err(format!("{} changed during a training step", params[i].0));
        }
    }
    Ok(format!("HMHA pass-through bitwise; {} FRM tensors with zero gradient", frm_ids.len()))
}

// ---------------------------------------------------------------- overfit

/// Synthetic linear target over two sensor channels.
pub fn linear_task(n: usize, cfg: &ModelConfig, seed: u64) -> (Vec<Tensor>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let (c, w) = (cfg.input_channels, cfg.window_width);
    let x: Vec<Tensor> = (0..n).map(|_| Tensor::new(vec![c, w], rng.uniform_vec(c * w, -1.0, 1.0)).unwrap()).collect();
    let y = x
        .iter()
        .map(|t| {
            let d = t.data();
            0.25 * d[..w].iter().sum::<f64>() - 0.125 * d[5 * w..6 * w].iter().sum::<f64>()
        })
        .collect();
    (x, y)
}

/// Full-batch training on 64 samples; returns `(last train MSE, eval MSE of best, steps)`.
pub fn fit_linear(arch: Arch, steps: usize) -> (f64, f64, u64) {
    let cfg = ModelConfig { arch, ..ModelConfig::tiny() };
    let (x, y) = linear_task(64, &cfg, 7);
    let all: Vec<usize> = (0..64).collect();
    let split = SplitIndex { train: all.clone(), val: all.clone(), test: vec![] };
    let tc = TrainConfig {
        batch_size: 64,
        max_epochs: steps,
        patience: steps,
        seed: 1,
        adam: AdamConfig { decay: 0.0, ..AdamConfig::default() },
    };
    let out = train(build_model(&cfg).unwrap(), &x, &y, &split, &tc).unwrap();
    let last = out.epochs.last().map_or(f64::INFINITY, |r| r.train_mse);
    (last, evaluate_mse(out.best.as_ref(), &x, &y, &all).unwrap(), out.steps)
}

pub fn overfit_smoke() -> Check {
    let start = Instant::now();
    let (train_mse, _, steps) = fit_linear(Arch::Menglan, 2000);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("train MSE {train_mse:.2e} after {steps} steps in {secs:.1}s");
    if train_mse < 1e-3 && steps <= 2000 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- splits

pub fn partition_ok(n: usize, s: &SplitIndex) -> Result<(), String> {
    let (tr, va) = (n * 6 / 10, n * 2 / 10);
    if (s.train.len(), s.val.len(), s.test.len()) != (tr, va, n - tr - va) {
        return Err(format!("n={n}: sizes {}/{}/{}", s.train.len(), s.val.len(), s.test.len()));
    }
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    if all != (0..n).collect::<Vec<_>>() {
        return Err(format!("n={n}: parts overlap or miss ids"));
    }
    Ok(())
}

pub fn split_282() -> Check {
    let s = split(282, 42).map_err(|e| e.to_string())?;
    let sizes = (s.train.len(), s.val.len(), s.test.len());
    if sizes != (169, 56, 57) {
        return Err(format!("n=282 gives {sizes:?}"));
    }
    partition_ok(282, &s)?;
    partition_ok(282, &split_chronological(282).map_err(|e| e.to_string())?)?;
    Ok("n=282 -> 169/56/57".into())
}
