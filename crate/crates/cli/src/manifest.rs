//! Dataset manifest: one row per cached file with its split assignment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use itowave::noise::{NoiseSource, SeededNoise};
use itowave::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const HEADER: &str = "file\tsplit\tsamples\tframes";

/// Relative split sizes train/valid/test.
const PROPORTIONS: [f64; 3] = [13000.0, 50.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub file: String,
    pub split: Split,
    pub samples: usize,
    pub frames: usize,
}

impl Entry {
    /// Cache file name: the WAV stem with a `.mel` extension.
    pub fn cache_name(&self) -> String {
        let stem = Path::new(&self.file)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.file);
        format!("{stem}.mel")
    }
}

/// Shuffles `n` items with `seed` and returns the split of each original
/// index. Valid and test each get at least one item when n ≥ 3.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let total: f64 = PROPORTIONS.iter().sum();
    let held = |p: f64| {
        let k = (n as f64 * p / total).round() as usize;
        if n >= 3 {
            k.max(1)
        } else {
            k
        }
    };
    let n_valid = held(PROPORTIONS[1]);
    let n_test = held(PROPORTIONS[2]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut noise = SeededNoise::stream(seed, 0);
    for i in (1..n).rev() {
        let j = ((noise.uniform() * (i + 1) as f64) as usize).min(i);
        order.swap(i, j);
    }
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            out[i] = Split::Test;
        } else if rank < n_test + n_valid {
            out[i] = Split::Valid;
        }
    }
    out
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut text = format!("{HEADER}\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", e.file, e.split, e.samples, e.frames));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Data(format!("{}: missing manifest header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Data(format!("{}: bad manifest row {l:?}", path.display()));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Entry {
                file: f[0].to_string(),
                split: f[1].parse()?,
                samples: f[2].parse().map_err(|_| bad())?,
                frames: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
