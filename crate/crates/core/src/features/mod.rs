//! Waveform I/O and log-mel conditioning features.

mod cache;
mod mel;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::{read_mel_cache, write_mel_cache, MEL_MAGIC, MEL_VERSION};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelFilterbank};
pub use stft::{hann_window, stft, Spectrogram};
pub use wav::{read_wav, read_wav_any_rate, write_wav};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            win_length: 1024,
            hop_length: 256,
            n_fft: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("feature: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.hop_length >= 1 && self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return bad(format!(
                "need 1 <= hop_length ({}) <= win_length ({}) <= n_fft ({})",
                self.hop_length, self.win_length, self.n_fft
            ));
        }
        if self.n_fft < 2 || !self.n_fft.is_multiple_of(2) {
            return bad(format!("n_fft must be even and at least 2, got {}", self.n_fft));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {nyquist}",
                self.fmin, self.fmax
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced by the centered STFT for `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop_length + 1
    }

    /// 64-bit digest of every field, used to detect feature mismatches
    /// between caches, checkpoints and sampling.
    pub fn fingerprint(&self) -> u64 {
        let canon = format!(
            "sr={};win={};hop={};nfft={};mels={};fmin={:e};fmax={:e};floor={:e};mel=htk;log=ln;power=2",
            self.sample_rate,
            self.win_length,
            self.hop_length,
            self.n_fft,
            self.n_mels,
            self.fmin,
            self.fmax,
            self.log_floor
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("waveform has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy with every sample clamped to [−1, 1].
    pub fn clamped(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Log-mel matrix, row-major `[n_frames × n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub fingerprint: u64,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f64>, n_frames: usize, n_mels: usize, fingerprint: u64) -> Result<Self> {
        if n_frames == 0 || n_mels == 0 || frames.len() != n_frames * n_mels {
            return Err(Error::Shape(format!(
                "mel data has {} values for {n_frames} frames x {n_mels} bins",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            n_frames,
            n_mels,
            fingerprint,
        })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.frames[frame * self.n_mels + mel]
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_frames {
            return Err(Error::Shape(format!(
                "frame slice {start}..{} outside {} frames",
                start + len,
                self.n_frames
            )));
        }
        Self::new(
            self.frames[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            len,
            self.n_mels,
            self.fingerprint,
        )
    }

    /// Training alignment: drop the final centre-padded frame so that
    /// `n_frames * hop` equals the cropped waveform length.
    pub fn aligned(&self) -> Result<Self> {
        if self.n_frames < 2 {
            return Err(Error::Shape("need at least two frames to align".into()));
        }
        self.slice(0, self.n_frames - 1)
    }

    pub fn check_fingerprint(&self, config: &FeatureConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    /// Mean absolute difference over all entries.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        if self.n_frames != other.n_frames || self.n_mels != other.n_mels {
            return Err(Error::Shape(format!(
                "mel {}x{} vs {}x{}",
                self.n_frames, self.n_mels, other.n_frames, other.n_mels
            )));
        }
        let s: f64 = self.frames.iter().zip(&other.frames).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.frames.len() as f64)
    }
}

/// Crops a waveform to whole hops and pairs it with the aligned mel.
pub fn aligned_pair(wave: &Waveform, config: &FeatureConfig) -> Result<(Vec<f64>, MelSpectrogram)> {
    let frames = wave.len() / config.hop_length;
    if frames == 0 {
        return Err(Error::Data(format!(
            "waveform of {} samples is shorter than one hop ({})",
            wave.len(),
            config.hop_length
        )));
    }
    let samples = wave.samples[..frames * config.hop_length].to_vec();
    let cropped = Waveform::new(samples.clone(), wave.sample_rate)?;
    let mel = mel_spectrogram(&cropped, config)?.aligned()?;
    debug_assert_eq!(mel.n_frames * config.hop_length, samples.len());
    Ok((samples, mel))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        FeatureConfig::default().validate().unwrap();
        assert_eq!(FeatureConfig::default().n_frames(22050), 87);
    }

    #[test]
    fn invalid_configs() {
        let c = FeatureConfig {
            fmax: 12000.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FeatureConfig {
            hop_length: 2048,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = FeatureConfig::default();
        let fp = base.fingerprint();
        assert_eq!(fp, FeatureConfig::default().fingerprint());
        let variants = [
            FeatureConfig {
                fmax: 7999.0,
                ..base.clone()
            },
            FeatureConfig {
                log_floor: 1e-6,
                ..base.clone()
            },
            FeatureConfig {
                n_mels: 79,
                ..base.clone()
            },
            FeatureConfig {
                sample_rate: 16000,
                ..base.clone()
            },
        ];
        for v in variants {
            assert_ne!(v.fingerprint(), fp);
        }
    }

    #[test]
    fn aligned_pair_lengths() {
        let cfg = FeatureConfig::default();
        let w = Waveform::new((0..5000).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), 22050).unwrap();
        let (x, mel) = aligned_pair(&w, &cfg).unwrap();
        assert_eq!(x.len(), 19 * 256);
        assert_eq!(mel.n_frames, 19);
    }
}
