//! Binary sample archive.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "MGLNDATA" | u32 version | u32 channels | u32 width | u64 count
//! f64 eps | f64 mean[channels] | f64 std[channels]
//! count × ( u32 level | u64 span_start | u64 span_end | f64 conc_a | f64 conc_b | f64 data[channels*width] )
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{SampleWindow, StandardizationStats};
use crate::error::{Error, Result};
use crate::model::geometry_hash_hex;
use crate::model::to_hex;
use crate::numcore::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"MGLNDATA";
pub const ARCHIVE_VERSION: u32 = 1;

/// Standardized windows plus the statistics used to produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub channels: usize,
    pub width: usize,
    pub stats: StandardizationStats,
    pub samples: Vec<SampleWindow>,
}

impl Archive {
    pub fn geometry_hash_hex(&self) -> String {
        geometry_hash_hex(self.channels, self.width)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = self.channels * self.width;
        let mut b = Vec::with_capacity(64 + self.samples.len() * (36 + 8 * per));
        b.extend_from_slice(ARCHIVE_MAGIC);
        b.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.channels as u32).to_le_bytes());
        b.extend_from_slice(&(self.width as u32).to_le_bytes());
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.stats.eps.to_le_bytes());
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            b.extend_from_slice(&(s.level as u32).to_le_bytes());
            b.extend_from_slice(&(s.span.0 as u64).to_le_bytes());
            b.extend_from_slice(&(s.span.1 as u64).to_le_bytes());
            b.extend_from_slice(&s.conc_a.to_le_bytes());
            b.extend_from_slice(&s.conc_b.to_le_bytes());
            for v in s.data.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Format("not a sample archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("archive version {version}, expected {ARCHIVE_VERSION}")));
        }
        let channels = r.u32()? as usize;
        let width = r.u32()? as usize;
        let count = r.u64()? as usize;
        if channels == 0 || width == 0 {
            return Err(Error::Format("archive has zero channels or width".into()));
        }
        let eps = r.f64()?;
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let per = channels * width;
        let mut samples = Vec::with_capacity(count.min(bytes.len() / (8 * per).max(1)));
        for _ in 0..count {
            let level = r.u32()? as usize;
            let span = (r.u64()? as usize, r.u64()? as usize);
            let conc_a = r.f64()?;
            let conc_b = r.f64()?;
            let data = (0..per).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            samples.push(SampleWindow {
                data: Tensor::new(vec![channels, width], data)?,
                conc_a,
                conc_b,
                span,
                level,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after archive", bytes.len() - r.pos)));
        }
        Ok(Self {
            channels,
            width,
            stats: StandardizationStats { mean, std, eps },
            samples,
        })
    }
}

struct Reader<'b> {
    b: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::Format(format!("truncated archive at byte {}", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes the archive and returns the SHA-256 hex digest of its bytes.
pub fn write_archive(path: impl AsRef<Path>, archive: &Archive) -> Result<String> {
    let bytes = archive.to_bytes();
    fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path, e))?;
    Ok(to_hex(&Sha256::digest(&bytes)))
}

/// Reads an archive and returns it with the SHA-256 hex digest of the file.
pub fn read_archive(path: impl AsRef<Path>) -> Result<(Archive, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = to_hex(&Sha256::digest(&bytes));
    Ok((Archive::from_bytes(&bytes)?, digest))
}
