use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{FeatureConfig, Waveform};

/// Complex STFT, row-major `[n_frames × n_bins]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Vec<Complex64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Periodic Hann window of `win_length`, zero-padded to `n_fft` and centred.
pub fn hann_window(config: &FeatureConfig) -> Vec<f64> {
    let n = config.win_length;
    let mut w = vec![0.0; config.n_fft];
    let off = (config.n_fft - n) / 2;
    for i in 0..n {
        w[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
    }
    w
}

/// Index into a signal of length `len` under reflect padding (edge sample
/// not repeated).
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Centred frames with reflect padding of `n_fft / 2` on both sides, so frame
/// `i` is centred on sample `i * hop` and there are `len / hop + 1` frames.
pub fn stft(wave: &Waveform, config: &FeatureConfig) -> Spectrogram {
    let n_fft = config.n_fft;
    let len = wave.samples.len();
    let n_frames = config.n_frames(len);
    let n_bins = config.n_bins();
    let window = hann_window(config);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(n_frames * n_bins);
    for f in 0..n_frames {
        let start = (f * config.hop_length) as isize - half;
        for (j, b) in buf.iter_mut().enumerate() {
            let s = wave.samples[reflect(start + j as isize, len)];
            *b = Complex64::new(s * window[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..n_bins]);
    }
    Spectrogram { data, n_frames, n_bins }
}
