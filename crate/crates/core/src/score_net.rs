//! Conditional score network: waveform input stage, two-layer transposed-conv
//! mel upsampler, sinusoidal time embedding, gated dilated residual blocks
//! with per-block mel conditioning, and a skip-sum output head.

use itowave_nn::{kaiming_uniform, Checkpoint, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MelSpectrogram};
use crate::sde::SdeSpec;

/// Multiplier on t before the sinusoidal encoding.
pub const TIME_SCALE: f64 = 50.0;
/// Ratio between the highest and lowest embedding frequency.
const TIME_FREQ_SPAN: f64 = 100.0;
const UPSAMPLE_SLOPE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub dilation_cycle: usize,
    pub kernel_size: usize,
    pub mel_bins: usize,
    pub upsample_strides: [usize; 2],
    pub time_embed_dim: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ScoreNetConfig {
    pub fn full() -> Self {
        Self {
            residual_layers: 30,
            residual_channels: 64,
            skip_channels: 64,
            dilation_cycle: 10,
            kernel_size: 3,
            mel_bins: 80,
            upsample_strides: [16, 16],
            time_embed_dim: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            residual_layers: 8,
            residual_channels: 32,
            dilation_cycle: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("residual_layers", self.residual_layers),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("dilation_cycle", self.dilation_cycle),
            ("mel_bins", self.mel_bins),
            ("upsample_strides[0]", self.upsample_strides[0]),
            ("upsample_strides[1]", self.upsample_strides[1]),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.time_embed_dim < 4 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time_embed_dim must be even and at least 4, got {}",
                self.time_embed_dim
            ));
        }
        if self.dilation_cycle > 30 {
            return bad(format!("dilation_cycle {} is too large", self.dilation_cycle));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.upsample_strides[0] * self.upsample_strides[1]
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.dilation_cycle)
    }

    /// Samples on either side of an output that the residual stack can see.
    pub fn receptive_radius(&self) -> usize {
        (0..self.residual_layers)
            .map(|i| self.dilation(i) * (self.kernel_size - 1) / 2)
            .sum()
    }

    /// Checks the config against the feature settings it will be fed.
    pub fn check_features(&self, features: &FeatureConfig) -> Result<()> {
        if self.hop() != features.hop_length {
            return Err(Error::Config(format!(
                "model.upsample_strides product {} must equal feature.hop_length {}",
                self.hop(),
                features.hop_length
            )));
        }
        if self.mel_bins != features.n_mels {
            return Err(Error::Config(format!(
                "model.mel_bins {} must equal feature.n_mels {}",
                self.mel_bins, features.n_mels
            )));
        }
        Ok(())
    }
}

/// Interleaved `[sin(f₀s), cos(f₀s), sin(f₁s), cos(f₁s), …]` with
/// `s = TIME_SCALE·t` and frequencies log-spaced from 1 down to 1/100.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = TIME_SCALE * t;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let f = if half > 1 {
            TIME_FREQ_SPAN.powf(-(j as f64) / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((f * s).sin());
        out.push((f * s).cos());
    }
    out
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    time: Conv,
    dilated: Conv,
    mel: Conv,
    residual: Conv,
    skip: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Conv,
    time1: Conv,
    time2: Conv,
    up: [Conv; 2],
    blocks: Vec<Block>,
    head1: Conv,
    head2: Conv,
}

/// Per-block mel projections for one utterance, computed once and reused for
/// every sampler step.
#[derive(Debug, Clone)]
pub struct MelCondition {
    per_block: Vec<Var>,
    len: usize,
}

impl MelCondition {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    config: ScoreNetConfig,
    params: ParamStore,
    layout: Layout,
    sde: SdeSpec,
    /// ln(log_floor), used to map log-mel values to roughly [−1, 1].
    mel_floor_ln: f64,
}

impl ScoreNet {
    pub fn new(config: &ScoreNetConfig, sde: &SdeSpec, features: &FeatureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        sde.validate()?;
        features.validate()?;
        config.check_features(features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = config.residual_channels;
        let s = config.skip_channels;
        let m = config.mel_bins;
        let e = config.time_embed_dim;
        let k = config.kernel_size;

        let mut conv = |ps: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, zero: bool| -> Result<Conv> {
            let w = if zero {
                Tensor::zeros(shape)
            } else {
                kaiming_uniform(shape, fan_in, &mut rng)
            };
            let c_out = if name.starts_with("upsample") {
                shape[1]
            } else {
                shape[0]
            };
            Ok(Conv {
                w: ps.add(format!("{name}.weight"), w)?,
                b: ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            })
        };

        let input = conv(&mut ps, "input", &[c, 1, 1], 1, false)?;
        let time1 = conv(&mut ps, "time.fc1", &[e, e], e, false)?;
        let time2 = conv(&mut ps, "time.fc2", &[e, e], e, false)?;
        let [s0, s1] = config.upsample_strides;
        let up = [
            conv(&mut ps, "upsample.0", &[m, m, 2 * s0], m * 2, false)?,
            conv(&mut ps, "upsample.1", &[m, m, 2 * s1], m * 2, false)?,
        ];
        let mut blocks = Vec::with_capacity(config.residual_layers);
        for i in 0..config.residual_layers {
            let p = format!("block.{i}");
            blocks.push(Block {
                time: conv(&mut ps, &format!("{p}.time"), &[c, e], e, false)?,
                dilated: conv(&mut ps, &format!("{p}.dilated"), &[2 * c, c, k], c * k, false)?,
                mel: conv(&mut ps, &format!("{p}.mel"), &[2 * c, m, 1], m, false)?,
                residual: conv(&mut ps, &format!("{p}.residual"), &[c, c, 1], c, false)?,
                skip: conv(&mut ps, &format!("{p}.skip"), &[s, c, 1], c, false)?,
            });
        }
        let head1 = conv(&mut ps, "head.0", &[s, s, 1], s, false)?;
        let head2 = conv(&mut ps, "head.1", &[1, s, 1], s, true)?;
        Ok(Self {
            config: config.clone(),
            params: ps,
            layout: Layout {
                input,
                time1,
                time2,
                up,
                blocks,
                head1,
                head2,
            },
            sde: *sde,
            mel_floor_ln: features.log_floor.ln(),
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn sde(&self) -> &SdeSpec {
        &self.sde
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    /// Loads weights; optimizer state in the checkpoint is kept in the store.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<u64> {
        Ok(ck.restore(&mut self.params)?)
    }

    fn bind(&self, c: &Conv, trainable: bool) -> (Var, Var) {
        (self.params.bind(c.w, trainable), self.params.bind(c.b, trainable))
    }

    fn conv(&self, x: &Var, c: &Conv, trainable: bool, dilation: usize) -> Result<Var> {
        let (w, b) = self.bind(c, trainable);
        let pad = dilation * (w.shape()[2] - 1) / 2;
        Ok(x.conv1d(&w, Some(&b), 1, dilation, pad)?)
    }

    fn dense(&self, x: &Var, c: &Conv, trainable: bool) -> Result<Var> {
        let (w, b) = self.bind(c, trainable);
        Ok(x.linear(&w, Some(&b))?)
    }

    /// Time embedding `[batch, time_embed_dim]` after the two-layer MLP.
    pub fn embed_time(&self, t: &[f64], trainable: bool) -> Result<Var> {
        let e = self.config.time_embed_dim;
        let mut data = Vec::with_capacity(t.len() * e);
        for &ti in t {
            self.sde.check_time(ti)?;
            data.extend(sinusoidal_embedding(ti, e));
        }
        let x = Var::constant(Tensor::new(vec![t.len(), e], data)?);
        let h = self.dense(&x, &self.layout.time1, trainable)?.tanh();
        Ok(self.dense(&h, &self.layout.time2, trainable)?.tanh())
    }

    /// Maps log-mel `[batch, mel_bins, frames]` to roughly [−1, 1]: the log
    /// floor goes to −1 and log-energy 0 to +1.
    pub fn normalize_mel(&self, mel: &Var) -> Var {
        mel.scale(-2.0 / self.mel_floor_ln).add_scalar(1.0)
    }

    /// Two transposed convolutions, each followed by leaky ReLU, trimmed to
    /// `len` samples. Input is the normalised mel `[batch, mel_bins, frames]`.
    pub fn upsample_mel(&self, mel: &Var, len: usize, trainable: bool) -> Result<Var> {
        let s = mel.shape();
        if s.len() != 3 || s[1] != self.config.mel_bins {
            return Err(Error::Shape(format!(
                "mel input {s:?} must be [batch, {}, frames]",
                self.config.mel_bins
            )));
        }
        let mut h = mel.clone();
        for (c, &stride) in self.layout.up.iter().zip(&self.config.upsample_strides) {
            let (w, b) = self.bind(c, trainable);
            h = h
                .conv_transpose1d(&w, Some(&b), stride, stride / 2)?
                .leaky_relu(UPSAMPLE_SLOPE);
        }
        let have = h.shape()[2];
        if have < len {
            return Err(Error::Shape(format!(
                "{} mel frames upsample to {have} samples, waveform needs {len}",
                s[2]
            )));
        }
        if have == len {
            Ok(h)
        } else {
            Ok(h.narrow(2, 0, len)?)
        }
    }

    /// Samples `[lo, hi]` of the upsampled mel that frame `j` touches.
    pub fn upsample_support(&self, frame: usize) -> (isize, isize) {
        let (mut lo, mut hi) = (frame as isize, frame as isize);
        for &s in &self.config.upsample_strides {
            let (s, p, k) = (s as isize, (s / 2) as isize, 2 * s as isize);
            lo = lo * s - p;
            hi = hi * s - p + k - 1;
        }
        (lo, hi)
    }

    /// One gated residual block. `mel_proj` is this block's projected mel
    /// condition `[batch, 2C, len]`; `time_vec` is `[batch, time_embed_dim]`.
    fn block(&self, i: usize, state: &Var, time_vec: &Var, mel_proj: &Var, trainable: bool) -> Result<(Var, Var)> {
        let b = &self.layout.blocks[i];
        let c = self.config.residual_channels;
        let tp = self.dense(time_vec, &b.time, trainable)?;
        let y = state.add_channel_bias(&tp)?;
        let y = self
            .conv(&y, &b.dilated, trainable, self.config.dilation(i))?
            .add(mel_proj)?;
        let gate = y.narrow(1, 0, c)?.tanh().mul(&y.narrow(1, c, c)?.sigmoid())?;
        let res = self.conv(&gate, &b.residual, trainable, 1)?;
        let skip = self.conv(&gate, &b.skip, trainable, 1)?;
        let next = state.add(&res)?.scale(std::f64::consts::FRAC_1_SQRT_2);
        Ok((next, skip))
    }

    /// Residual block `i` with the shared upsampled mel `[batch, mel_bins, len]`.
    pub fn residual_block(
        &self,
        i: usize,
        state: &Var,
        time_vec: &Var,
        mel_up: &Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        if i >= self.layout.blocks.len() {
            return Err(Error::Shape(format!("block {i} of {}", self.layout.blocks.len())));
        }
        let mel_proj = self.conv(mel_up, &self.layout.blocks[i].mel, trainable, 1)?;
        self.block(i, state, time_vec, &mel_proj, trainable)
    }

    fn trunk(&self, x: &Var, t: &[f64], mel_proj: &[Var], trainable: bool) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != 1 || xs[0] != t.len() {
            return Err(Error::Shape(format!(
                "waveform input {xs:?} must be [batch, 1, len] with batch = {} times",
                t.len()
            )));
        }
        let temb = self.embed_time(t, trainable)?;
        let mut h = self.conv(x, &self.layout.input, trainable, 1)?.relu();
        let mut skips: Option<Var> = None;
        for (i, mp) in mel_proj.iter().enumerate() {
            let (next, skip) = self.block(i, &h, &temb, mp, trainable)?;
            h = next;
            skips = Some(match skips {
                None => skip,
                Some(acc) => acc.add(&skip)?,
            });
        }
        let n = self.layout.blocks.len() as f64;
        let out = skips.expect("at least one block").scale(1.0 / n.sqrt());
        let out = self.conv(&out, &self.layout.head1, trainable, 1)?.relu();
        let out = self.conv(&out, &self.layout.head2, trainable, 1)?;
        let inv: Vec<f64> = t.iter().map(|&ti| 1.0 / self.sde.noise_scale(ti)).collect();
        Ok(out.scale_batch(&inv)?)
    }

    /// Score estimate for `x` `[batch, 1, len]` at per-item times `t`, given
    /// raw log-mel `[batch, mel_bins, frames]`. Output has the shape of `x`.
    pub fn forward(&self, x: &Var, t: &[f64], mel: &Var, trainable: bool) -> Result<Var> {
        let len = *x.shape().last().unwrap_or(&0);
        let up = self.upsample_mel(&self.normalize_mel(mel), len, trainable)?;
        if up.shape()[0] != x.shape()[0] {
            return Err(Error::Shape(format!(
                "mel batch {} vs waveform batch {}",
                up.shape()[0],
                x.shape()[0]
            )));
        }
        let proj = self
            .layout
            .blocks
            .iter()
            .map(|b| self.conv(&up, &b.mel, trainable, 1))
            .collect::<Result<Vec<_>>>()?;
        self.trunk(x, t, &proj, trainable)
    }

    /// Frozen-weight mel conditioning for a single utterance of `len` samples.
    pub fn condition(&self, mel: &MelSpectrogram, len: usize) -> Result<MelCondition> {
        let m = Var::constant(mel_tensor(&[mel])?);
        let up = self.upsample_mel(&self.normalize_mel(&m), len, false)?;
        let per_block = self
            .layout
            .blocks
            .iter()
            .map(|b| self.conv(&up, &b.mel, false, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(MelCondition { per_block, len })
    }

    /// Inference score for one utterance.
    pub fn score(&self, cond: &MelCondition, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != cond.len {
            return Err(Error::Shape(format!(
                "state has {} samples, condition has {}",
                x.len(),
                cond.len
            )));
        }
        let xv = Var::constant(Tensor::new(vec![1, 1, x.len()], x.to_vec())?);
        let out = self.trunk(&xv, &[t], &cond.per_block, false)?;
        Ok(out.value().data().to_vec())
    }
}

/// Stacks mel spectrograms into `[batch, n_mels, frames]`.
pub fn mel_tensor(mels: &[&MelSpectrogram]) -> Result<Tensor> {
    let first = mels.first().ok_or_else(|| Error::Shape("empty mel batch".into()))?;
    let (f, m) = (first.n_frames, first.n_mels);
    let mut data = Vec::with_capacity(mels.len() * f * m);
    for mel in mels {
        if mel.n_frames != f || mel.n_mels != m {
            return Err(Error::Shape(format!(
                "mel batch mixes {f}x{m} and {}x{}",
                mel.n_frames, mel.n_mels
            )));
        }
        for b in 0..m {
            data.extend((0..f).map(|i| mel.get(i, b)));
        }
    }
    Ok(Tensor::new(vec![mels.len(), m, f], data)?)
}
