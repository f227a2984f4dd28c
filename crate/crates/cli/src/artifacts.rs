//! On-disk artifacts: digests, ingest records, run manifests, CSV files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use menglan::trainer::{EpochRow, MetricsReport};
use menglan::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const EPOCH_HEADER: &str = "epoch,train_mse,val_mse,seconds";
pub const METRICS_HEADER: &str = "model,target,params,rmse,mse,mae,r2,total_s,avg_s";
pub const BENCH_HEADER: &str = "model,params,bytes,samples,repeats,median_total_s,median_avg_s,p10_avg_s,p90_avg_s";
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `<archive>.split`: the sample split fixed at ingest time.
pub fn split_path(archive: &Path) -> PathBuf {
    sidecar(archive, "split")
}

/// `<archive>.ingest.json`: provenance of an archive.
pub fn ingest_record_path(archive: &Path) -> PathBuf {
    sidecar(archive, "ingest.json")
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        })
    }
}

/// Written next to every archive by `ingest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub source: FileDigest,
    pub archive: FileDigest,
    pub split: FileDigest,
    pub split_mode: String,
    pub seed: u64,
    pub width: usize,
    pub stride: usize,
    pub cap: Option<usize>,
    pub target: String,
    pub records: usize,
    pub levels: usize,
    pub distinct_levels: usize,
    pub samples: usize,
}

impl IngestRecord {
    pub fn load(archive: &Path) -> Result<Self> {
        let path = ingest_record_path(archive);
        let bytes = read_bytes(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Fails when the archive or split file no longer matches what ingest wrote.
    pub fn verify(&self, archive_digest: &str, split_digest: &str) -> Result<()> {
        if self.archive.sha256 != archive_digest {
            return Err(Error::Format(format!(
                "archive digest {archive_digest} does not match ingest record {}",
                self.archive.sha256
            )));
        }
        if self.split.sha256 != split_digest {
            return Err(Error::Format(format!(
                "split file digest {split_digest} does not match ingest record {}",
                self.split.sha256
            )));
        }
        Ok(())
    }
}

/// One per output directory, written before any training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub build: String,
    pub datasets: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, datasets: Vec<FileDigest>) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            build: build_id(),
            datasets,
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            notes: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&dir.join(MANIFEST_NAME), &(text + "\n"))
    }

    pub fn finish(&mut self, status: &str) {
        self.finished_unix = Some(unix_now());
        self.status = status.into();
    }
}

pub fn build_id() -> String {
    format!(
        "{} {}{}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        option_env!("MENGLAN_BUILD_ID").map(|s| format!("+{s}")).unwrap_or_default()
    )
}

/// Epoch log written row by row so a partial run still leaves a readable file.
pub struct EpochCsv {
    path: PathBuf,
    file: fs::File,
}

impl EpochCsv {
    pub fn create(path: PathBuf) -> Result<Self> {
        let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        writeln!(file, "{EPOCH_HEADER}").map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn push(&mut self, r: &EpochRow) -> Result<()> {
        writeln!(self.file, "{},{},{},{}", r.epoch, r.train_mse, r.val_mse, r.seconds).map_err(|e| io_err(&self.path, e))
    }
}

pub fn metrics_row(model: &str, target: &str, params: usize, m: &MetricsReport) -> String {
    format!(
        "{model},{target},{params},{},{},{},{},{},{}",
        m.rmse, m.mse, m.mae, m.r2, m.total_s, m.avg_s
    )
}

pub fn csv_text(header: &str, rows: &[String]) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecars_append_extension() {
        let a = Path::new("/tmp/x/data.mgd");
        assert_eq!(split_path(a), Path::new("/tmp/x/data.mgd.split"));
        assert_eq!(ingest_record_path(a), Path::new("/tmp/x/data.mgd.ingest.json"));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn metrics_row_has_header_arity() {
        let m = menglan::trainer::metrics(&[0.0, 2.0], &[1.0, 1.0], 2.0).unwrap();
        let row = metrics_row("MENGLAN", "ethylene", 10, &m);
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
    }
}
