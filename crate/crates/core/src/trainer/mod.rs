//! Training loop, metrics, optimizer, latency benchmark and baselines.

mod baselines;
mod metrics;
mod optim;

pub use baselines::{build_baseline, AnnModel, CnnModel};
pub use metrics::{metrics, mse_grad, mse_loss, MetricsReport};
pub use optim::{adam_step, AdamConfig, AdamState, DecayMode};

use std::time::Instant;

use crate::data::SplitIndex;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{commit_bn_stats, predict, predict_many, ForwardCtx, Regressor};
use crate::numcore::{Graph, Rng, Tensor};

/// Loop settings; the optimizer lives in `adam`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_epochs: 200,
            patience: 15,
            seed: 42,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience_epochs must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        self.adam.validate()
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub best: Box<dyn Regressor>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs: Vec<EpochRow>,
    pub steps: u64,
    pub stopped_early: bool,
    /// Set when training stopped on a non-finite loss or gradient; `best` is then the last finite checkpoint.
    pub diverged: Option<String>,
}

/// One minibatch step: forward in training mode, MSE, backward, Adam.
/// Returns the batch loss.
pub fn train_step(model: &mut dyn Regressor, state: &mut AdamState, x: &Tensor, y: &[f64], rng: &mut Rng) -> Result<f64> {
    let mut ctx = ForwardCtx::new(Mode::Train, std::mem::replace(rng, Rng::new(0)));
    let outcome = forward_backward(&*model, x, y, &mut ctx);
    *rng = std::mem::replace(&mut ctx.rng, Rng::new(0));
    let (loss, grads, names) = outcome?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite training loss at step {}", state.t + 1)));
    }
    let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
    adam_step(state, &names, &mut model.params_mut(), &grad_refs)?;
    commit_bn_stats(model, ctx.take_bn_stats());
    Ok(loss)
}

type StepGrads = (f64, Vec<Option<Tensor>>, Vec<String>);

fn forward_backward(model: &dyn Regressor, x: &Tensor, y: &[f64], ctx: &mut ForwardCtx) -> Result<StepGrads> {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let pred = model.forward(&mut g, xv, ctx)?;
    let loss = g.mse(pred, y)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let named = model.named_params();
    let per_param = named
        .iter()
        .map(|(_, t)| g.param_var(t).and_then(|v| grads.get(v)).cloned())
        .collect();
    Ok((value, per_param, named.into_iter().map(|(n, _)| n).collect()))
}

/// Mean squared error of inference-mode predictions on the given ids.
pub fn evaluate_mse(model: &dyn Regressor, x: &[Tensor], y: &[f64], ids: &[usize]) -> Result<f64> {
    let windows: Vec<&Tensor> = ids.iter().map(|&i| &x[i]).collect();
    let targets: Vec<f64> = ids.iter().map(|&i| y[i]).collect();
    mse_loss(&targets, &predict_many(model, &windows)?)
}

/// Minibatch Adam training with early stopping on validation MSE.
///
/// Each epoch shuffles the training ids with a stream derived from
/// `cfg.seed` and the epoch number; dropout draws from its own derived
/// stream. The model with the lowest validation MSE is returned; training
/// stops after `patience` epochs without improvement or at `max_epochs`.
pub fn train(model: Box<dyn Regressor>, x: &[Tensor], y: &[f64], split: &SplitIndex, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, x, y, split, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    mut model: Box<dyn Regressor>,
    x: &[Tensor],
    y: &[f64],
    split: &SplitIndex,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::dim("train", format!("{} windows vs {} targets", x.len(), y.len())));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Contract("training and validation splits must be non-empty".into()));
    }
    if let Some(&bad) = split.train.iter().chain(&split.val).find(|&&i| i >= x.len()) {
        return Err(Error::Contract(format!("split id {bad} out of range for {} samples", x.len())));
    }
    let shapes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut state = AdamState::new(cfg.adam, &shapes);
    let root = Rng::new(cfg.seed);
    let mut dropout_rng = root.derive("dropout");

    let mut best = model.clone_box();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut rows = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        state.lr = cfg.adam.lr_at_epoch(epoch - 1);
        let mut order = split.train.clone();
        root.derive(&format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let windows: Vec<&Tensor> = batch.iter().map(|&i| &x[i]).collect();
            let xb = Tensor::stack(&windows)?;
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            match train_step(model.as_mut(), &mut state, &xb, &yb, &mut dropout_rng) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(Error::Divergence(msg)) => {
                    log::error!("epoch {epoch}: {msg}");
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_mse = loss_sum / order.len() as f64;
        let val_mse = evaluate_mse(model.as_ref(), x, y, &split.val)?;
        if !val_mse.is_finite() {
            diverged = Some(format!("epoch {epoch}: non-finite validation loss"));
            break;
        }
        let row = EpochRow {
            epoch,
            train_mse,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        on_epoch(&row);
        rows.push(row);
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.clone_box();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_mse: best_val,
        epochs: rows,
        steps: state.t,
        stopped_early,
        diverged,
    })
}

/// Inference-mode metrics on the given ids, timed as one batched pass.
pub fn evaluate(model: &dyn Regressor, x: &[Tensor], y: &[f64], ids: &[usize]) -> Result<MetricsReport> {
    let windows: Vec<&Tensor> = ids.iter().map(|&i| &x[i]).collect();
    let targets: Vec<f64> = ids.iter().map(|&i| y[i]).collect();
    let start = Instant::now();
    let pred = predict_many(model, &windows)?;
    metrics(&targets, &pred, start.elapsed().as_secs_f64())
}

/// Latency benchmark output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Metrics with the median total time of the repeats.
    pub report: MetricsReport,
    /// Total seconds of each repeat.
    pub totals: Vec<f64>,
    pub predictions: Vec<f64>,
}

impl BenchReport {
    /// Per-sample latency at the given percentile (0–100) over repeats.
    pub fn percentile_avg(&self, pct: f64) -> f64 {
        percentile(&self.totals, pct) / self.report.count as f64
    }
}

/// Nearest-rank percentile of `v`.
pub fn percentile(v: &[f64], pct: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

/// Batch-size-1 inference on a single worker, repeated `repeats` times;
/// the report carries the median total. Fails if any repeat's predictions
/// differ from the first.
pub fn bench_inference(model: &dyn Regressor, x: &[&Tensor], y: &[f64], repeats: usize) -> Result<BenchReport> {
    if repeats == 0 || x.is_empty() || x.len() != y.len() {
        return Err(Error::Contract("bench needs repeats >= 1 and matching non-empty inputs".into()));
    }
    crate::numcore::par::single_worker(|| bench_repeats(model, x, y, repeats))
}

fn bench_repeats(model: &dyn Regressor, x: &[&Tensor], y: &[f64], repeats: usize) -> Result<BenchReport> {
    let mut totals = Vec::with_capacity(repeats);
    let mut first: Option<Vec<f64>> = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let pred = x.iter().map(|w| predict(model, w, Mode::Inference)).collect::<Result<Vec<_>>>()?;
        totals.push(start.elapsed().as_secs_f64());
        match &first {
            None => first = Some(pred),
            Some(p) if p.iter().zip(&pred).all(|(a, b)| a.to_bits() == b.to_bits()) => {}
            Some(_) => return Err(Error::Contract("inference predictions changed between repeats".into())),
        }
    }
    let predictions = first.expect("repeats >= 1");
    let median = {
        let mut s = totals.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    };
    Ok(BenchReport {
        report: metrics(y, &predictions, median)?,
        totals,
        predictions,
    })
}
