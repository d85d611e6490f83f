//! Run configuration: every tunable in one TOML file with a section per
//! module, plus the named presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::sampler::SamplerConfig;
use crate::score_net::ScoreNetConfig;
use crate::sde::SdeSpec;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: "data/wavs".into(),
            cache_dir: "work/cache".into(),
            checkpoint_dir: "work/checkpoints".into(),
            output_dir: "work/output".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub feature: FeatureConfig,
    pub sde: SdeSpec,
    pub model: ScoreNetConfig,
    pub train: TrainingConfig,
    pub sample: SamplerConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// σ₁ = σ₀√e with the full-size network.
    Paper,
    /// σ₁ = 1 with the full-size network.
    Wide,
    /// σ₁ = 1 with the 8-block network and short training crops.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "wide" => Ok(Self::Wide),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper, wide or desk)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Wide => "wide",
            Self::Desk => "desk",
        })
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                sde: SdeSpec::paper(),
                ..Self::default()
            },
            Preset::Wide => Self::default(),
            Preset::Desk => {
                let mut c = Self {
                    model: ScoreNetConfig::desk(),
                    ..Self::default()
                };
                c.train.batch_size = 4;
                c.train.segment_length = 2048;
                c.train.max_steps = 2000;
                c.train.checkpoint_every = 500;
                c.train.adam.learning_rate = 1e-3;
                c
            }
        }
    }

    /// Per-module checks plus the cross-module constraints.
    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.sde.validate()?;
        self.model.validate()?;
        self.model.check_features(&self.feature)?;
        self.train.validate(self.feature.hop_length)?;
        self.sample.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::default(), text)
    }

    /// Keys present in `text` override `base`; everything else keeps the
    /// base value.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let over: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).expect("config serialises");
        merge(&mut merged, over);
        let c: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// TOML with a comment above every key.
    pub fn to_annotated_toml(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for line in self.to_toml().lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                if !out.is_empty() && !out.ends_with("\n\n") {
                    out.push('\n');
                }
            } else if let Some((key, _)) = trimmed.split_once(" = ") {
                if let Some(doc) = describe(&format!("{section}.{key}")) {
                    out.push_str("# ");
                    out.push_str(doc);
                    out.push('\n');
                }
            }
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(&Self::default(), path)
    }

    pub fn load_over(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_over(base, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_annotated_toml()).map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn describe(key: &str) -> Option<&'static str> {
    Some(match key {
        "feature.sample_rate" => "input sample rate in Hz; no resampling is done",
        "feature.win_length" => "Hann window length in samples",
        "feature.hop_length" => "STFT hop in samples; must equal the product of model.upsample_strides",
        "feature.n_fft" => "FFT size",
        "feature.n_mels" => "mel bands (HTK scale)",
        "feature.fmin" => "lowest filter edge in Hz",
        "feature.fmax" => "highest filter edge in Hz",
        "feature.log_floor" => "mel power floor before the natural log",
        "sde.sigma0" => "noise scale at t = 0",
        "sde.sigma1" => "noise scale at t = t_max; prior is N(0, sigma1^2 I)",
        "sde.t_max" => "diffusion horizon T",
        "sde.t_min" => "lower cutoff for training times",
        "sde.n_steps" => "forward-simulation steps",
        "model.residual_layers" => "number of dilated residual blocks",
        "model.residual_channels" => "channels in the residual stream",
        "model.skip_channels" => "channels in the skip sum and output head",
        "model.dilation_cycle" => "block i uses dilation 2^(i mod dilation_cycle)",
        "model.kernel_size" => "dilated convolution kernel (odd)",
        "model.mel_bins" => "mel bands fed to the upsampler; must equal feature.n_mels",
        "model.upsample_strides" => "strides of the two transposed convolutions",
        "model.time_embed_dim" => "width of the sinusoidal time embedding",
        "train.batch_size" => "crops per optimizer step",
        "train.segment_length" => "crop length in samples; multiple of feature.hop_length",
        "train.max_steps" => "stop after this many optimizer steps",
        "train.loss_norm" => "\"l2\" or \"l1\"",
        "train.loss_weighting" => "\"variance\" multiplies each term by the transition variance, \"none\" does not",
        "train.checkpoint_every" => "write step_{N}.ckpt every this many steps",
        "train.seed" => "seed for crops, times and noise",
        "train.adam.learning_rate" => "Adam step size",
        "train.adam.beta1" => "Adam first-moment decay",
        "train.adam.beta2" => "Adam second-moment decay",
        "train.adam.epsilon" => "Adam denominator offset",
        "sample.n_steps" => "reverse-time steps N",
        "sample.corrector_steps_per_iter" => "Langevin steps after each predictor step",
        "sample.snr" => "signal-to-noise ratio r of the adaptive corrector step",
        "sample.epsilon_rule" => "\"snr_adaptive\" or \"fixed\"",
        "sample.fixed_epsilon" => "corrector step for the fixed rule and the zero-score fallback",
        "sample.seed" => "seed for the prior draw and sampler noise",
        "sample.snapshot_steps" => "reverse iterations completed at which to dump the state",
        "paths.dataset_dir" => "directory of input WAV files",
        "paths.cache_dir" => "mel caches and the split manifest",
        "paths.checkpoint_dir" => "training checkpoints and metrics",
        "paths.output_dir" => "generated audio and diagnostics",
        _ => return None,
    })
}
