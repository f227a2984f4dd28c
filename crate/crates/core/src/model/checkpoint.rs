//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MGLNCKPT" | u32 version | 32-byte SHA-256 of the config record
//! u32 record_len | record (canonical config JSON, UTF-8)
//! u32 bn_layers | per layer: u32 channels, f64 running_mean[ch], f64 running_var[ch]
//! u64 param_count | f64 params[param_count]   (declaration order)
//! ```
//!
//! The parameter block is last, so `file_len - 8 * param_count` is the header size.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{build_model, count_params, ModelConfig, Regressor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGLNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything before the parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub config: ModelConfig,
    pub param_count: usize,
    /// Bytes preceding the parameter block.
    pub header_len: usize,
}

pub fn write_checkpoint(model: &dyn Regressor) -> Vec<u8> {
    let cfg = model.config();
    let record = cfg.canonical_record();
    let n = count_params(model).count;
    let mut b = Vec::with_capacity(128 + record.len() + 8 * n);
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&cfg.hash());
    b.extend_from_slice(&(record.len() as u32).to_le_bytes());
    b.extend_from_slice(record.as_bytes());
    let bns = model.batch_norms();
    b.extend_from_slice(&(bns.len() as u32).to_le_bytes());
    for bn in bns {
        b.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
        for v in bn.running_mean.iter().chain(&bn.running_var) {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b.extend_from_slice(&(n as u64).to_le_bytes());
    for (_, t) in model.named_params() {
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Parses checkpoint bytes, validating magic, version and config hash.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(Box<dyn Regressor>, CheckpointHeader)> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {pos}")))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let config_hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
    let rlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let record = std::str::from_utf8(take(rlen)?).map_err(|_| Error::Format("config record is not UTF-8".into()))?;
    let actual: [u8; 32] = Sha256::digest(record.as_bytes()).into();
    if actual != config_hash {
        return Err(Error::Format(format!(
            "config hash mismatch: header {} vs record {}",
            super::to_hex(&config_hash),
            super::to_hex(&actual)
        )));
    }
    let config = ModelConfig::from_record(record)?;
    let mut model = build_model(&config)?;

    let n_bn = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut bn_buffers = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let ch = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let vals: Vec<f64> = take(16 * ch)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        bn_buffers.push((ch, vals));
    }
    let param_count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header_len = pos;
    let expected = count_params(model.as_ref()).count;
    if param_count != expected || bytes.len() - header_len != 8 * param_count {
        return Err(Error::Format(format!(
            "parameter block holds {param_count} values ({} bytes), config implies {expected}",
            bytes.len() - header_len
        )));
    }

    {
        let mut bns = model.batch_norms_mut();
        if bns.len() != n_bn {
            return Err(Error::Format(format!("{n_bn} batch-norm buffers, model has {}", bns.len())));
        }
        for (bn, (ch, vals)) in bns.iter_mut().zip(bn_buffers) {
            if ch != bn.channels() {
                return Err(Error::Format(format!("batch-norm buffer of {ch} channels, expected {}", bn.channels())));
            }
            bn.running_mean.copy_from_slice(&vals[..ch]);
            bn.running_var.copy_from_slice(&vals[ch..]);
        }
    }
    let mut floats = bytes[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v = floats.next().expect("length checked");
        }
    }
    Ok((
        model,
        CheckpointHeader {
            version,
            config_hash,
            config,
            param_count,
            header_len,
        },
    ))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &dyn Regressor) -> Result<()> {
    fs::write(path.as_ref(), write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Box<dyn Regressor>, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
