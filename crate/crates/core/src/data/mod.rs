//! Sensor-file ingestion, standardization, level windowing and splits.

mod archive;
mod split;

pub use archive::{read_archive, write_archive, Archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use split::{read_split_file, split, split_chronological, write_split_file, SplitIndex, SplitPart};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Sensor channels per record.
pub const SENSOR_CHANNELS: usize = 16;
const COLUMNS: usize = 3 + SENSOR_CHANNELS;

/// Which concentration column a model regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetGas {
    /// Second concentration column.
    #[default]
    Ethylene,
    /// First concentration column (CO or methane, depending on the file).
    #[serde(alias = "co", alias = "methane")]
    Other,
}

impl TargetGas {
    pub fn name(self) -> &'static str {
        match self {
            TargetGas::Ethylene => "ethylene",
            TargetGas::Other => "other",
        }
    }
}

impl fmt::Display for TargetGas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetGas {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ethylene" => Ok(TargetGas::Ethylene),
            "other" | "co" | "methane" => Ok(TargetGas::Other),
            other => Err(Error::Config(format!("unknown target gas `{other}`"))),
        }
    }
}

/// One row of a raw sensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub time: f64,
    /// CO or methane, ppm.
    pub conc_a: f64,
    /// Ethylene, ppm.
    pub conc_b: f64,
    pub sensors: [f64; SENSOR_CHANNELS],
}

impl RawRecord {
    pub fn concentration(&self, gas: TargetGas) -> f64 {
        match gas {
            TargetGas::Ethylene => self.conc_b,
            TargetGas::Other => self.conc_a,
        }
    }
}

/// Reads a whitespace-separated `time conc_a conc_b s1..s16` file.
pub fn parse_raw_file(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw_str(&text)
}

/// Parses raw-file text. A first line that does not start with a number is
/// treated as a header and skipped; blank lines are ignored.
pub fn parse_raw_str(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 && line.split_whitespace().next().is_some_and(|t| t.parse::<f64>().is_err()) {
            continue;
        }
        out.push(parse_line(line, lineno)?);
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != COLUMNS {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {COLUMNS} columns, found {}", fields.len()),
        });
    }
    let mut vals = [0.0; COLUMNS];
    for (j, (slot, f)) in vals.iter_mut().zip(&fields).enumerate() {
        let v: f64 = f.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("column {}: `{f}` is not a number", j + 1),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("column {}: non-finite value", j + 1),
            });
        }
        *slot = v;
    }
    if vals[1] < 0.0 || vals[2] < 0.0 {
        return Err(Error::Parse {
            line: lineno,
            msg: "negative concentration".into(),
        });
    }
    let mut sensors = [0.0; SENSOR_CHANNELS];
    sensors.copy_from_slice(&vals[3..]);
    Ok(RawRecord {
        time: vals[0],
        conc_a: vals[1],
        conc_b: vals[2],
        sensors,
    })
}

/// Formats records in the raw-file layout (shortest round-trip float text).
pub fn format_raw(records: &[RawRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let mut fields = vec![r.time.to_string(), r.conc_a.to_string(), r.conc_b.to_string()];
        fields.extend(r.sensors.iter().map(|v| v.to_string()));
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    s
}

/// A maximal run of records with constant `(conc_a, conc_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub conc_a: f64,
    pub conc_b: f64,
    /// Record index range `start..end`.
    pub start: usize,
    pub end: usize,
}

impl Level {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn concentration(&self, gas: TargetGas) -> f64 {
        match gas {
            TargetGas::Ethylene => self.conc_b,
            TargetGas::Other => self.conc_a,
        }
    }
}

/// Contiguous constant-concentration spans in record order.
pub fn detect_levels(records: &[RawRecord]) -> Vec<Level> {
    let mut levels: Vec<Level> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match levels.last_mut() {
            Some(l) if l.conc_a == r.conc_a && l.conc_b == r.conc_b => l.end = i + 1,
            _ => levels.push(Level {
                conc_a: r.conc_a,
                conc_b: r.conc_b,
                start: i,
                end: i + 1,
            }),
        }
    }
    levels
}

/// Number of distinct `(conc_a, conc_b)` pairs among the levels.
pub fn distinct_level_count(levels: &[Level]) -> usize {
    let mut pairs: Vec<(u64, u64)> = levels.iter().map(|l| (l.conc_a.to_bits(), l.conc_b.to_bits())).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.len()
}

/// Per-channel z-score parameters: `x' = (x − mean) / (std + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

pub const STANDARDIZE_EPS: f64 = 1e-8;

impl StandardizationStats {
    /// Population mean and standard deviation over the given records.
    pub fn fit(records: &[RawRecord]) -> Result<Self> {
        Self::fit_rows(records.iter().map(|r| &r.sensors[..]))
    }

    /// Statistics over the time steps of `[C, W]` windows.
    pub fn fit_windows(windows: &[&SampleWindow]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Contract("standardization needs at least one window".into()));
        };
        let c = first.data.shape()[0];
        let mut sum = vec![0.0; c];
        let mut n = 0usize;
        for w in windows {
            let width = w.data.shape()[1];
            for (ch, row) in w.data.data().chunks(width).enumerate() {
                sum[ch] += row.iter().sum::<f64>();
            }
            n += width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; c];
        for w in windows {
            let width = w.data.shape()[1];
            for (ch, row) in w.data.data().chunks(width).enumerate() {
                sq[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self {
            mean,
            std,
            eps: STANDARDIZE_EPS,
        })
    }

    fn fit_rows<'r>(rows: impl Iterator<Item = &'r [f64]> + Clone) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        for row in rows.clone() {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
            }
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Contract("standardization needs at least one record".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; mean.len()];
        for row in rows {
            for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self {
            mean,
            std,
            eps: STANDARDIZE_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / (self.std[channel] + self.eps)
    }

    pub fn invert(&self, channel: usize, z: f64) -> f64 {
        z * (self.std[channel] + self.eps) + self.mean[channel]
    }

    /// Standardizes a `[C, W]` tensor in place of a copy.
    pub fn apply_tensor(&self, x: &Tensor) -> Tensor {
        let width = x.shape()[1];
        let mut out = x.clone();
        for (ch, row) in out.data_mut().chunks_mut(width).enumerate() {
            for v in row {
                *v = self.apply(ch, *v);
            }
        }
        out
    }
}

/// Z-scores the sensor columns, fitting the statistics when none are given.
pub fn standardize(records: &[RawRecord], stats: Option<&StandardizationStats>) -> Result<(Vec<RawRecord>, StandardizationStats)> {
    if records.is_empty() {
        return Err(Error::Contract("cannot standardize an empty record set".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => StandardizationStats::fit(records)?,
    };
    if stats.channels() != SENSOR_CHANNELS {
        return Err(Error::Contract(format!("stats cover {} channels, records have {SENSOR_CHANNELS}", stats.channels())));
    }
    let out = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for (c, v) in r.sensors.iter_mut().enumerate() {
                *v = stats.apply(c, *v);
            }
            r
        })
        .collect();
    Ok((out, stats))
}

/// Reverses [`standardize`].
pub fn destandardize(records: &[RawRecord], stats: &StandardizationStats) -> Vec<RawRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for (c, v) in r.sensors.iter_mut().enumerate() {
                *v = stats.invert(c, *v);
            }
            r
        })
        .collect()
}

/// Window extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub width: usize,
    pub stride: usize,
    /// Maximum windows per level span.
    pub cap: Option<usize>,
}

/// One `[channels, W]` sample with both nominal concentrations of its level.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub data: Tensor,
    pub conc_a: f64,
    pub conc_b: f64,
    /// Record index range `start..end` the window was cut from.
    pub span: (usize, usize),
    /// Index into the level list the window came from.
    pub level: usize,
}

impl SampleWindow {
    pub fn target(&self, gas: TargetGas) -> f64 {
        match gas {
            TargetGas::Ethylene => self.conc_b,
            TargetGas::Other => self.conc_a,
        }
    }
}

/// Cuts fixed-width windows inside each level span; spans shorter than the
/// window are skipped with a warning.
pub fn make_windows(records: &[RawRecord], levels: &[Level], cfg: WindowConfig) -> Result<Vec<SampleWindow>> {
    if cfg.width == 0 || cfg.stride == 0 {
        return Err(Error::Config("window width and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        if level.end > records.len() {
            return Err(Error::Contract(format!("level {li} ends past the record stream")));
        }
        if level.len() < cfg.width {
            log::warn!(
                "level {li} ({} records, conc {} / {}) shorter than window {}; skipped",
                level.len(),
                level.conc_a,
                level.conc_b,
                cfg.width
            );
            continue;
        }
        let n = (level.len() - cfg.width) / cfg.stride + 1;
        let n = cfg.cap.map_or(n, |c| n.min(c));
        for j in 0..n {
            let start = level.start + j * cfg.stride;
            let rows = &records[start..start + cfg.width];
            let mut data = vec![0.0; SENSOR_CHANNELS * cfg.width];
            for (t, r) in rows.iter().enumerate() {
                for (c, v) in r.sensors.iter().enumerate() {
                    data[c * cfg.width + t] = *v;
                }
            }
            out.push(SampleWindow {
                data: Tensor::new(vec![SENSOR_CHANNELS, cfg.width], data)?,
                conc_a: level.conc_a,
                conc_b: level.conc_b,
                span: (start, start + cfg.width),
                level: li,
            });
        }
    }
    Ok(out)
}
