use super::stft::stft;
use super::{FeatureConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, row-major `[n_mels × n_bins]`, unnormalised (peak 1).
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Nonzero bin range of each filter.
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Applies the filterbank to one power spectrum.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.spans[m];
            let row = self.row(m);
            *o = (lo..hi).map(|k| row[k] * power[k]).sum();
        }
    }
}

pub fn mel_filterbank(config: &FeatureConfig) -> Result<MelFilterbank> {
    config.validate()?;
    let n_bins = config.n_bins();
    let n_mels = config.n_mels;
    let (mlo, mhi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    let mut spans = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            *w = up.min(down).max(0.0);
        }
        let lo = row.iter().position(|&w| w > 0.0);
        let hi = row.iter().rposition(|&w| w > 0.0);
        match (lo, hi) {
            (Some(lo), Some(hi)) => spans.push((lo, hi + 1)),
            _ => {
                return Err(Error::Config(format!(
                    "feature: mel filter {m} covers no FFT bin; n_mels = {n_mels} is too large for n_fft = {}",
                    config.n_fft
                )))
            }
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        spans,
    })
}

/// `ln(max(mel_power, log_floor))` per frame and mel band.
pub fn mel_spectrogram(wave: &Waveform, config: &FeatureConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate != config.sample_rate {
        return Err(Error::Rate {
            expected: config.sample_rate,
            found: wave.sample_rate,
        });
    }
    if wave.is_empty() {
        return Err(Error::Data("cannot compute features of an empty waveform".into()));
    }
    let fb = mel_filterbank(config)?;
    let spec = stft(wave, config);
    let mut frames = vec![0.0; spec.n_frames * fb.n_mels];
    let mut power = vec![0.0; spec.n_bins];
    for f in 0..spec.n_frames {
        for (p, c) in power.iter_mut().zip(spec.frame(f)) {
            *p = c.norm_sqr();
        }
        let out = &mut frames[f * fb.n_mels..(f + 1) * fb.n_mels];
        fb.apply(&power, out);
        for v in out.iter_mut() {
            *v = v.max(config.log_floor).ln();
        }
    }
    MelSpectrogram::new(frames, spec.n_frames, fb.n_mels, config.fingerprint())
}
