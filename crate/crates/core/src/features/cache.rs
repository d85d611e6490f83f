//! Mel cache file:
//!
//! ```text
//! magic        8 bytes "ITWMEL\0\0"
//! version      u32 LE
//! fingerprint  u64 LE
//! n_frames     u32 LE
//! n_mels       u32 LE
//! values       f64 LE, row-major [n_frames × n_mels]
//! ```

use std::fs;
use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};

pub const MEL_MAGIC: &[u8; 8] = b"ITWMEL\0\0";
pub const MEL_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 4 + 4;

pub fn write_mel_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER + mel.frames.len() * 8);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&MEL_VERSION.to_le_bytes());
    out.extend_from_slice(&mel.fingerprint.to_le_bytes());
    out.extend_from_slice(&(mel.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for v in &mel.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mel_cache(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER || &bytes[..8] != MEL_MAGIC {
        return Err(bad("not a mel cache file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != MEL_VERSION {
        return Err(bad(&format!("unsupported mel cache version {version}")));
    }
    let fingerprint = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n_frames = u32_at(20) as usize;
    let n_mels = u32_at(24) as usize;
    if bytes.len() != HEADER + n_frames * n_mels * 8 {
        return Err(bad("length does not match header"));
    }
    let frames = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(frames, n_frames, n_mels, fingerprint)
}
