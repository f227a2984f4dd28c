use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Train/validation/test sample ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One of the three partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" | "validation" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl SplitIndex {
    pub fn part(&self, p: SplitPart) -> &[usize] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition sizes `(floor(0.6n), floor(0.2n), rest)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

fn cut(ids: Vec<usize>) -> SplitIndex {
    let (a, b, _) = split_sizes(ids.len());
    SplitIndex {
        train: ids[..a].to_vec(),
        val: ids[a..a + b].to_vec(),
        test: ids[a + b..].to_vec(),
    }
}

fn check_len(n: usize) -> Result<()> {
    if n < 5 {
        return Err(Error::Contract(format!("split needs at least 5 samples, got {n}")));
    }
    Ok(())
}

/// Seeded shuffle of `0..n`, then a contiguous 6:2:2 cut.
pub fn split(n: usize, seed: u64) -> Result<SplitIndex> {
    check_len(n)?;
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::new(seed).derive("split").shuffle(&mut ids);
    Ok(cut(ids))
}

/// 6:2:2 cut of `0..n` in sample order (no shuffle).
pub fn split_chronological(n: usize) -> Result<SplitIndex> {
    check_len(n)?;
    Ok(cut((0..n).collect()))
}

/// Writes `[train]`, `[val]`, `[test]` sections with one id per line.
pub fn write_split_file(path: impl AsRef<Path>, s: &SplitIndex) -> Result<()> {
    let mut text = String::new();
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        text.push_str(&format!("[{part}]\n"));
        for id in s.part(part) {
            text.push_str(&format!("{id}\n"));
        }
    }
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: impl AsRef<Path>) -> Result<SplitIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text)
}

fn parse_split(text: &str) -> Result<SplitIndex> {
    let mut s = SplitIndex {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut current: Option<SplitPart> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("unknown section `{name}`"),
            })?);
            continue;
        }
        let Some(part) = current else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "id before any section header".into(),
            });
        };
        let id: usize = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("`{line}` is not a sample id"),
        })?;
        match part {
            SplitPart::Train => s.train.push(id),
            SplitPart::Val => s.val.push(id),
            SplitPart::Test => s.test.push(id),
        }
    }
    Ok(s)
}
