use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use menglan::data::{
    detect_levels, distinct_level_count, make_windows, parse_raw_file, read_archive, read_split_file, split,
    split_chronological, write_archive, write_split_file, Archive, SampleWindow, SplitIndex, SplitPart,
    StandardizationStats, TargetGas, WindowConfig, SENSOR_CHANNELS,
};
use menglan::layers::Activation;
use menglan::model::{build_model, count_params, load_checkpoint, save_checkpoint, Arch, ModelConfig, SizePreset};
use menglan::numcore::{Rng, Tensor};
use menglan::trainer::{bench_inference, evaluate, train_with, BenchReport, TrainOutcome};
use menglan::{Error, Result};

use crate::artifacts::{
    csv_text, file_digest, ingest_record_path, io_err, metrics_row, split_path, write_text, EpochCsv, FileDigest,
    IngestRecord, RunManifest, BENCH_HEADER, METRICS_HEADER,
};
use crate::config::RunConfig;

/// Published per-sample inference time, printed for comparison only.
pub const REFERENCE_AVG_S: f64 = 5e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoFrm,
    NoHmha,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "no-frm" => Ok(Ablation::NoFrm),
            "no-hmha" => Ok(Ablation::NoHmha),
            other => Err(Error::Config(format!("unknown ablation `{other}` (expected no-frm or no-hmha)"))),
        }
    }
}

/// Row label used in metrics CSVs.
pub fn model_label(cfg: &ModelConfig) -> String {
    match cfg.arch {
        Arch::Ann => "ANN".into(),
        Arch::Cnn => "CNN".into(),
        Arch::Menglan => match (cfg.use_frm, cfg.use_hmha) {
            (true, true) => "MENGLAN".into(),
            (false, true) => "w/o FRM".into(),
            (true, false) => "w/o HMHA".into(),
            (false, false) => "w/o FRM & HMHA".into(),
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

// ---------------------------------------------------------------- ingest

pub struct IngestArgs {
    pub raw: PathBuf,
    pub out: PathBuf,
    pub width: usize,
    pub stride: usize,
    pub cap: Option<usize>,
    pub target: TargetGas,
    pub seed: u64,
    pub chronological: bool,
}

pub fn ingest(a: &IngestArgs) -> Result<String> {
    let records = parse_raw_file(&a.raw)?;
    let levels = detect_levels(&records);
    let mut windows = make_windows(
        &records,
        &levels,
        WindowConfig {
            width: a.width,
            stride: a.stride,
            cap: a.cap,
        },
    )?;
    if windows.is_empty() {
        return Err(Error::Config(format!("no level spans at least {} records long", a.width)));
    }
    let n = windows.len();
    let split_index = if n < 5 {
        log::warn!("{n} samples cannot be split 6:2:2; all go to the training part");
        SplitIndex {
            train: (0..n).collect(),
            val: Vec::new(),
            test: Vec::new(),
        }
    } else if a.chronological {
        split_chronological(n)?
    } else {
        split(n, a.seed)?
    };
    let train_windows: Vec<&SampleWindow> = split_index.train.iter().map(|&i| &windows[i]).collect();
    let stats = StandardizationStats::fit_windows(&train_windows)?;
    for w in &mut windows {
        w.data = stats.apply_tensor(&w.data);
    }
    let archive = Archive {
        channels: SENSOR_CHANNELS,
        width: a.width,
        stats,
        samples: windows,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let archive_digest = write_archive(&a.out, &archive)?;
    let split_file = split_path(&a.out);
    write_split_file(&split_file, &split_index)?;
    let record = IngestRecord {
        source: FileDigest::of(&a.raw)?,
        archive: FileDigest {
            path: a.out.display().to_string(),
            sha256: archive_digest.clone(),
        },
        split: FileDigest::of(&split_file)?,
        split_mode: if a.chronological { "chronological" } else { "random" }.into(),
        seed: a.seed,
        width: a.width,
        stride: a.stride,
        cap: a.cap,
        target: a.target.to_string(),
        records: records.len(),
        levels: levels.len(),
        distinct_levels: distinct_level_count(&levels),
        samples: n,
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    write_text(&ingest_record_path(&a.out), &(json + "\n"))?;

    let targets: Vec<f64> = archive.samples.iter().map(|s| s.target(a.target)).collect();
    let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    let _ = writeln!(out, "records {}", records.len());
    let _ = writeln!(out, "levels {} (distinct {})", levels.len(), record.distinct_levels);
    let _ = writeln!(
        out,
        "samples {n} (train {}, val {}, test {})",
        split_index.train.len(),
        split_index.val.len(),
        split_index.test.len()
    );
    let _ = writeln!(out, "target {} range [{lo}, {hi}]", a.target);
    let _ = writeln!(out, "channel,mean,std");
    for (c, (m, s)) in archive.stats.mean.iter().zip(&archive.stats.std).enumerate() {
        let _ = writeln!(out, "{c},{m},{s}");
    }
    let _ = writeln!(out, "archive {} sha256 {archive_digest}", a.out.display());
    Ok(out)
}

// ---------------------------------------------------------------- datasets

pub struct Dataset {
    pub archive: Archive,
    pub split: SplitIndex,
    pub digests: Vec<FileDigest>,
}

impl Dataset {
    /// Reads an archive and its split, checking both against the ingest record.
    pub fn load(path: &Path) -> Result<Self> {
        let (archive, archive_digest) = read_archive(path)?;
        let record = IngestRecord::load(path)?;
        let split_file = split_path(path);
        let split_digest = file_digest(&split_file)?;
        record.verify(&archive_digest, &split_digest)?;
        let split = read_split_file(&split_file)?;
        if let Some(&bad) = split.train.iter().chain(&split.val).chain(&split.test).find(|&&i| i >= archive.samples.len()) {
            return Err(Error::Format(format!("split id {bad} out of range for {} samples", archive.samples.len())));
        }
        Ok(Self {
            archive,
            split,
            digests: vec![
                FileDigest {
                    path: path.display().to_string(),
                    sha256: archive_digest,
                },
                FileDigest {
                    path: split_file.display().to_string(),
                    sha256: split_digest,
                },
            ],
        })
    }

    pub fn windows(&self) -> Vec<Tensor> {
        self.archive.samples.iter().map(|s| s.data.clone()).collect()
    }

    pub fn targets(&self, gas: TargetGas) -> Vec<f64> {
        self.archive.samples.iter().map(|s| s.target(gas)).collect()
    }

    /// Refuses a model whose input geometry differs from the archive's.
    pub fn check_geometry(&self, cfg: &ModelConfig) -> Result<()> {
        let (model, data) = (cfg.geometry_hash_hex(), self.archive.geometry_hash_hex());
        if model != data {
            return Err(Error::Format(format!(
                "checkpoint geometry hash {model} does not match archive geometry hash {data}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- train / sweep

struct RunFiles {
    epochs: PathBuf,
    checkpoint: PathBuf,
}

fn train_one(
    cfg: &ModelConfig,
    label: &str,
    run: &RunConfig,
    data: &Dataset,
    x: &[Tensor],
    files: &RunFiles,
) -> Result<(TrainOutcome, String)> {
    let y = data.targets(cfg.target);
    let model = build_model(cfg)?;
    let mut log = EpochCsv::create(files.epochs.clone())?;
    let mut write_err = None;
    let outcome = train_with(model, x, &y, &data.split, &run.train_config(), |row| {
        if let Err(e) = log.push(row) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(&files.checkpoint, outcome.best.as_ref())?;
    let report = evaluate(outcome.best.as_ref(), x, &y, &data.split.val)?;
    let params = count_params(outcome.best.as_ref()).count;
    let row = metrics_row(label, cfg.target.name(), params, &report);
    Ok((outcome, row))
}

fn outcome_note(tag: &str, o: &TrainOutcome) -> String {
    format!(
        "{tag}: best epoch {} val_mse {} after {} epochs ({} steps){}{}",
        o.best_epoch,
        o.best_val_mse,
        o.epochs.len(),
        o.steps,
        if o.stopped_early { ", stopped early" } else { "" },
        o.diverged.as_ref().map(|d| format!(", diverged at {d}")).unwrap_or_default()
    )
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub archive: PathBuf,
    pub out: PathBuf,
    pub ablate: Vec<Ablation>,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

pub fn train_cmd(a: &TrainArgs) -> Result<String> {
    let run = load_run_config(a.config.as_deref())?;
    let data = Dataset::load(&a.archive)?;
    let mut cfg = run.model_config(data.archive.channels, data.archive.width)?;
    for ab in &a.ablate {
        if cfg.arch != Arch::Menglan {
            return Err(Error::Config(format!("--ablate applies to menglan, config selects {}", cfg.arch)));
        }
        match ab {
            Ablation::NoFrm => cfg.use_frm = false,
            Ablation::NoHmha => cfg.use_hmha = false,
        }
    }
    run.train_config().validate()?;
    create_dir(&a.out)?;

    let files = RunFiles {
        epochs: a.out.join("epochs.csv"),
        checkpoint: a.out.join("model.ckpt"),
    };
    let metrics_path = a.out.join("metrics.csv");
    let mut manifest = RunManifest::new("train", snapshot(&run, &cfg), run.seed, data.digests.clone());
    manifest.outputs = [&files.epochs, &files.checkpoint, &metrics_path]
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    manifest.write(&a.out)?;

    let x = data.windows();
    let (outcome, row) = train_one(&cfg, &model_label(&cfg), &run, &data, &x, &files)?;
    write_text(&metrics_path, &csv_text(METRICS_HEADER, std::slice::from_ref(&row)))?;
    let note = outcome_note(&model_label(&cfg), &outcome);
    manifest.notes.push(note.clone());
    manifest.finish(if outcome.diverged.is_some() { "diverged" } else { "ok" });
    manifest.write(&a.out)?;
    if let Some(d) = outcome.diverged {
        return Err(Error::Divergence(format!("{d}; best checkpoint kept at {}", files.checkpoint.display())));
    }
    Ok(format!("{note}\n{METRICS_HEADER}\n{row}\n"))
}

fn snapshot(run: &RunConfig, cfg: &ModelConfig) -> serde_json::Value {
    serde_json::json!({
        "run": run,
        "model": cfg,
        "model_config_sha256": cfg.hash_hex(),
    })
}

pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub archive: PathBuf,
    pub out: PathBuf,
    pub targets: Vec<TargetGas>,
}

pub fn sweep(a: &SweepArgs) -> Result<String> {
    let run = load_run_config(a.config.as_deref())?;
    let data = Dataset::load(&a.archive)?;
    let base = run.model_config(data.archive.channels, data.archive.width)?;
    run.train_config().validate()?;
    let targets = if a.targets.is_empty() { vec![base.target] } else { a.targets.clone() };
    create_dir(&a.out)?;

    let metrics_path = a.out.join("metrics.csv");
    let mut runs = Vec::new();
    for &target in &targets {
        for act in Activation::ALL {
            let tag = format!("{target}-{act}");
            let files = RunFiles {
                epochs: a.out.join(format!("epochs-{tag}.csv")),
                checkpoint: a.out.join(format!("model-{tag}.ckpt")),
            };
            let cfg = ModelConfig {
                activation: act,
                target,
                ..base.clone()
            };
            runs.push((tag, cfg, files));
        }
    }
    let mut manifest = RunManifest::new("sweep", snapshot(&run, &base), run.seed, data.digests.clone());
    for (_, _, f) in &runs {
        manifest.outputs.push(f.epochs.display().to_string());
        manifest.outputs.push(f.checkpoint.display().to_string());
    }
    manifest.outputs.push(metrics_path.display().to_string());
    manifest.write(&a.out)?;

    let x = data.windows();
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for (tag, cfg, files) in &runs {
        let label = format!("{} ({})", model_label(cfg), cfg.activation);
        let (outcome, row) = train_one(cfg, &label, &run, &data, &x, files)?;
        manifest.notes.push(outcome_note(tag, &outcome));
        if outcome.diverged.is_some() {
            diverged.push(tag.clone());
        }
        rows.push(row);
    }
    let text = csv_text(METRICS_HEADER, &rows);
    write_text(&metrics_path, &text)?;
    manifest.finish(if diverged.is_empty() { "ok" } else { "diverged" });
    manifest.write(&a.out)?;
    if !diverged.is_empty() {
        return Err(Error::Divergence(format!("runs diverged: {}", diverged.join(", "))));
    }
    Ok(text)
}

// ---------------------------------------------------------------- eval

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub archive: PathBuf,
    pub split: SplitPart,
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let (model, header) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.archive)?;
    data.check_geometry(&header.config)?;
    let ids = data.split.part(a.split);
    if ids.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", a.split)));
    }
    let cfg = &header.config;
    let report = evaluate(model.as_ref(), &data.windows(), &data.targets(cfg.target), ids)?;
    let row = metrics_row(&model_label(cfg), cfg.target.name(), header.param_count, &report);
    let text = csv_text(METRICS_HEADER, &[row]);
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(text)
}

// ---------------------------------------------------------------- bench

pub struct BenchArgs {
    pub checkpoint: Option<PathBuf>,
    pub presets: bool,
    pub config: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub split: SplitPart,
    pub samples: usize,
    pub repeats: usize,
    pub out: Option<PathBuf>,
}

/// One benchmarked model.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub model: String,
    pub params: usize,
    pub bytes: usize,
    pub report: BenchReport,
}

impl BenchRow {
    pub fn csv(&self, repeats: usize) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{repeats},{},{},{},{}",
            self.model,
            self.params,
            self.bytes,
            r.report.count,
            r.report.total_s,
            r.report.avg_s,
            r.percentile_avg(10.0),
            r.percentile_avg(90.0)
        )
    }
}

fn bench_inputs(a: &BenchArgs, channels: usize, width: usize, gas: TargetGas) -> Result<(Vec<Tensor>, Vec<f64>)> {
    match &a.archive {
        Some(path) => {
            let data = Dataset::load(path)?;
            if (data.archive.channels, data.archive.width) != (channels, width) {
                return Err(Error::Format(format!(
                    "model expects {channels}x{width} windows, archive holds {}x{}",
                    data.archive.channels, data.archive.width
                )));
            }
            let mut ids = data.split.part(a.split).to_vec();
            if ids.is_empty() {
                ids = (0..data.archive.samples.len()).collect();
            }
            ids.truncate(a.samples.max(1));
            let x = ids.iter().map(|&i| data.archive.samples[i].data.clone()).collect();
            let y = ids.iter().map(|&i| data.archive.samples[i].target(gas)).collect();
            Ok((x, y))
        }
        None => {
            let mut rng = Rng::new(0).derive("bench/inputs");
            let x = (0..a.samples.max(1))
                .map(|_| Tensor::new(vec![channels, width], rng.uniform_vec(channels * width, -1.0, 1.0)))
                .collect::<Result<Vec<_>>>()?;
            Ok((x, vec![0.0; a.samples.max(1)]))
        }
    }
}

/// Benchmarks either one checkpoint or the three size presets.
pub fn bench_rows(a: &BenchArgs) -> Result<Vec<BenchRow>> {
    let mut models = Vec::new();
    match (&a.checkpoint, a.presets) {
        (Some(path), false) => {
            let (model, header) = load_checkpoint(path)?;
            models.push((model_label(&header.config), model));
        }
        (None, true) => {
            let run = load_run_config(a.config.as_deref())?;
            let (channels, width) = match &a.archive {
                Some(p) => {
                    let d = Dataset::load(p)?;
                    (d.archive.channels, d.archive.width)
                }
                None => (SENSOR_CHANNELS, ModelConfig::default().window_width),
            };
            let base = RunConfig { preset: None, ..run }.model_config(channels, width)?;
            for p in SizePreset::ALL {
                let cfg = p.config(&base)?;
                models.push((format!("{}-{}", model_label(&cfg), p.name()), build_model(&cfg)?));
            }
        }
        _ => return Err(Error::Config("bench needs exactly one of --checkpoint or --presets".into())),
    }
    let mut rows = Vec::new();
    for (label, model) in models {
        let cfg = model.config().clone();
        let (x, y) = bench_inputs(a, cfg.input_channels, cfg.window_width, cfg.target)?;
        let refs: Vec<&Tensor> = x.iter().collect();
        let report = bench_inference(model.as_ref(), &refs, &y, a.repeats)?;
        let size = count_params(model.as_ref());
        rows.push(BenchRow {
            model: label,
            params: size.count,
            bytes: size.bytes,
            report,
        });
    }
    Ok(rows)
}

/// Whether median per-sample latency never drops as parameter count grows.
pub fn latency_monotone(rows: &[BenchRow]) -> bool {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.params);
    sorted.windows(2).all(|w| w[0].report.report.avg_s <= w[1].report.report.avg_s)
}

pub fn bench(a: &BenchArgs) -> Result<String> {
    if a.repeats == 0 {
        return Err(Error::Config("--repeats must be >= 1".into()));
    }
    let rows = bench_rows(a)?;
    let mut lines: Vec<String> = rows.iter().map(|r| r.csv(a.repeats)).collect();
    lines.push(format!("reference,,,,,,{REFERENCE_AVG_S},,"));
    let text = csv_text(BENCH_HEADER, &lines);
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    let mut shown = text;
    let _ = writeln!(shown, "reference: published average inference {REFERENCE_AVG_S} s/sample (report only)");
    if rows.len() > 1 {
        let _ = writeln!(
            shown,
            "latency non-decreasing in parameter count: {}",
            if latency_monotone(&rows) { "yes" } else { "no" }
        );
    }
    Ok(shown)
}
