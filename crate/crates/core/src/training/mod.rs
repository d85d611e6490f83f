//! Denoising score matching: draw t uniformly, perturb a waveform crop
//! through the transition density, regress the network on the transition
//! score, update with Adam.

pub mod toy;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use itowave_nn::{backward, Adam, AdamConfig, Checkpoint, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::noise::{NoiseSource, SeededNoise};
use crate::score_net::{mel_tensor, ScoreNet};
use crate::sde::{sample_transition, SdeSpec};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const METRICS_HEADER: &str = "step\tloss\tlearning_rate\twall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    None,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(s: AdamSettings) -> Self {
        AdamConfig {
            learning_rate: s.learning_rate,
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub segment_length: usize,
    pub max_steps: u64,
    pub loss_norm: LossNorm,
    pub loss_weighting: LossWeighting,
    pub adam: AdamSettings,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            segment_length: 16384,
            max_steps: 100_000,
            loss_norm: LossNorm::L2,
            loss_weighting: LossWeighting::Variance,
            adam: AdamSettings::default(),
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, hop: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.max_steps == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, max_steps and checkpoint_every must be positive".into());
        }
        if self.segment_length == 0 || !self.segment_length.is_multiple_of(hop) {
            return bad(format!(
                "segment_length {} must be a positive multiple of hop_length {hop}",
                self.segment_length
            ));
        }
        AdamConfig::from(self.adam)
            .validate()
            .map_err(|e| Error::Config(format!("train.adam: {e}")))
    }
}

/// A waveform with its aligned mel: `samples.len() == mel.n_frames * hop`.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub samples: Vec<f64>,
    pub mel: MelSpectrogram,
}

impl TrainingClip {
    pub fn new(samples: Vec<f64>, mel: MelSpectrogram, hop: usize) -> Result<Self> {
        check_alignment(&samples, &mel, hop)?;
        Ok(Self { samples, mel })
    }
}

fn check_alignment(x: &[f64], mel: &MelSpectrogram, hop: usize) -> Result<()> {
    if x.len() != mel.n_frames * hop {
        return Err(Error::Alignment {
            samples: x.len(),
            frames: mel.n_frames,
            hop,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Vec<f64>,
    pub mel: MelSpectrogram,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws t ~ U[t_min, t_max] and a perturbed copy of `x0` with its score
/// target.
pub fn make_example(
    x0: &[f64],
    mel: &MelSpectrogram,
    spec: &SdeSpec,
    hop: usize,
    noise: &mut dyn NoiseSource,
) -> Result<TrainExample> {
    check_alignment(x0, mel, hop)?;
    let t = spec.t_min + (spec.t_max - spec.t_min) * noise.uniform();
    let (x_t, target) = sample_transition(spec, x0, t, noise)?;
    Ok(TrainExample {
        x0: x0.to_vec(),
        mel: mel.clone(),
        t,
        x_t,
        target,
    })
}

/// Batch mean of the per-example loss. `prediction` and `target` have shape
/// `[batch, ...]`; `t` holds one time per batch item.
///
/// L2: ½(pred − target)², L1: |pred − target|. Variance weighting multiplies
/// the L2 term by variance(t) and the L1 term by its square root, which is
/// the same as regressing the unit-variance noise.
pub fn dsm_loss(prediction: &Var, target: &Tensor, t: &[f64], spec: &SdeSpec, config: &TrainingConfig) -> Result<Var> {
    if prediction.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.shape().first() != Some(&t.len()) {
        return Err(Error::Shape(format!(
            "{} times for batch {:?}",
            t.len(),
            prediction.shape()
        )));
    }
    if !prediction.value().all_finite() {
        return Err(Error::Numerical {
            step: 0,
            msg: "score prediction is not finite".into(),
        });
    }
    let diff = prediction.sub(&Var::constant(target.clone()))?;
    let per = match config.loss_norm {
        LossNorm::L2 => diff.mul(&diff)?.scale(0.5),
        LossNorm::L1 => diff.abs(),
    };
    let per = match config.loss_weighting {
        LossWeighting::None => per,
        LossWeighting::Variance => {
            let w: Vec<f64> = t
                .iter()
                .map(|&ti| {
                    let v = spec.variance(ti);
                    match config.loss_norm {
                        LossNorm::L2 => v,
                        LossNorm::L1 => v.sqrt(),
                    }
                })
                .collect();
            per.scale_batch(&w)?
        }
    };
    Ok(per.mean())
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Numerical {
            step: step as usize,
            msg,
        },
        Error::Nn(itowave_nn::NnError::NonFinite(msg)) => Error::Numerical {
            step: step as usize,
            msg,
        },
        other => other,
    }
}

/// Optimizer state and the step counter. The network is passed to each call
/// so that callers keep ownership.
#[derive(Debug, Clone)]
pub struct Trainer {
    spec: SdeSpec,
    config: TrainingConfig,
    hop: usize,
    adam: Adam,
}

impl Trainer {
    pub fn new(spec: &SdeSpec, config: &TrainingConfig, hop: usize) -> Result<Self> {
        spec.validate()?;
        config.validate(hop)?;
        Ok(Self {
            spec: *spec,
            config: config.clone(),
            hop,
            adam: Adam::new(config.adam.into())?,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.adam.step_count
    }

    fn check_dataset(&self, data: &[TrainingClip]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        for (i, c) in data.iter().enumerate() {
            check_alignment(&c.samples, &c.mel, self.hop)?;
            if c.samples.len() < self.config.segment_length {
                return Err(Error::Data(format!(
                    "clip {i} has {} samples, shorter than segment_length {}",
                    c.samples.len(),
                    self.config.segment_length
                )));
            }
        }
        Ok(())
    }

    /// Examples for optimizer step `step` (0-based), drawn from the noise
    /// stream keyed by `(seed, step)` so a resumed run sees the same data.
    pub fn make_batch(&self, data: &[TrainingClip], step: u64) -> Result<Vec<TrainExample>> {
        self.check_dataset(data)?;
        let mut noise = SeededNoise::stream(self.config.seed, step);
        let seg_frames = self.config.segment_length / self.hop;
        (0..self.config.batch_size)
            .map(|_| {
                let clip = &data[((noise.uniform() * data.len() as f64) as usize).min(data.len() - 1)];
                let starts = clip.mel.n_frames - seg_frames + 1;
                let f0 = ((noise.uniform() * starts as f64) as usize).min(starts - 1);
                let x0 = &clip.samples[f0 * self.hop..(f0 + seg_frames) * self.hop];
                let mel = clip.mel.slice(f0, seg_frames)?;
                make_example(x0, &mel, &self.spec, self.hop, &mut noise)
            })
            .collect()
    }

    /// Loss of `batch` under the current network with the graph recorded.
    pub fn batch_loss(&self, net: &ScoreNet, batch: &[TrainExample], trainable: bool) -> Result<Var> {
        let b = batch.len();
        let len = batch[0].x_t.len();
        let x = Tensor::new(
            vec![b, 1, len],
            batch.iter().flat_map(|e| e.x_t.iter().copied()).collect(),
        )?;
        let target = Tensor::new(
            vec![b, 1, len],
            batch.iter().flat_map(|e| e.target.iter().copied()).collect(),
        )?;
        let mels: Vec<&MelSpectrogram> = batch.iter().map(|e| &e.mel).collect();
        let mel = Var::constant(mel_tensor(&mels)?);
        let t: Vec<f64> = batch.iter().map(|e| e.t).collect();
        let pred = net.forward(&Var::constant(x), &t, &mel, trainable)?;
        dsm_loss(&pred, &target, &t, &self.spec, &self.config)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, net: &mut ScoreNet, data: &[TrainingClip]) -> Result<f64> {
        let step = self.step();
        let batch = self.make_batch(data, step)?;
        let run = |net: &mut ScoreNet, adam: &mut Adam| -> Result<f64> {
            let loss = self.batch_loss(net, &batch, true)?;
            let value = loss.value().data()[0];
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Numerical {
                    step: 0,
                    msg: format!("loss {value} diverged (limit {DIVERGENCE_LIMIT})"),
                });
            }
            let grads = backward(&loss)?;
            let params = net.params_mut();
            params.zero_grad();
            params.accumulate(&grads)?;
            adam.step(params)?;
            Ok(value)
        };
        let mut adam = self.adam.clone();
        let out = run(net, &mut adam).map_err(|e| at_step(e, step))?;
        self.adam = adam;
        Ok(out)
    }

    /// Parameters, Adam moments and step count.
    pub fn checkpoint(&self, net: &ScoreNet) -> Checkpoint {
        Checkpoint::with_optimizer(net.params(), self.adam.step_count)
    }

    pub fn resume(&mut self, net: &mut ScoreNet, ck: &Checkpoint) -> Result<()> {
        self.adam.step_count = net.load_checkpoint(ck)?;
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.config.learning_rate
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub start_step: u64,
    pub final_step: u64,
    /// `(step, loss)` for the steps run in this call.
    pub losses: Vec<(u64, f64)>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step}.ckpt")
}

/// Highest-numbered `step_{N}.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

/// Keeps the header and the records with step <= `keep`.
fn truncate_metrics(path: &Path, keep: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if step.is_none_or(|s| s <= keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs steps until `config.max_steps`, resuming from the latest checkpoint
/// in `out.checkpoint_dir` if there is one. Metric records use 1-based step
/// numbers: record `n` is the loss of the n-th update.
pub fn train(
    dataset: &[TrainingClip],
    net: &mut ScoreNet,
    spec: &SdeSpec,
    config: &TrainingConfig,
    out: &TrainOutput,
) -> Result<TrainReport> {
    let hop = net.config().hop();
    let mut trainer = Trainer::new(spec, config, hop)?;
    trainer.check_dataset(dataset)?;
    if let Some(dir) = &out.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some((step, path)) = latest_checkpoint(dir)? {
            let ck = Checkpoint::load(&path)?;
            trainer.resume(net, &ck)?;
            if trainer.step() != step {
                return Err(Error::Data(format!(
                    "{} records optimizer step {}",
                    path.display(),
                    trainer.step()
                )));
            }
            log::info!("resuming from {} at step {step}", path.display());
        }
    }
    let start_step = trainer.step();
    let mut metrics = match &out.metrics_path {
        Some(p) => {
            if start_step > 0 && p.exists() {
                truncate_metrics(p, start_step)?;
            } else {
                fs::write(p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(p, e))?;
            }
            Some((
                fs::OpenOptions::new()
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
                p.clone(),
            ))
        }
        None => None,
    };
    let clock = Instant::now();
    let mut losses = Vec::new();
    while trainer.step() < config.max_steps {
        let loss = trainer.train_step(net, dataset)?;
        let step = trainer.step();
        losses.push((step, loss));
        if let Some((f, p)) = metrics.as_mut() {
            writeln!(
                f,
                "{step}\t{loss:e}\t{:e}\t{}",
                trainer.learning_rate(),
                clock.elapsed().as_millis()
            )
            .map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(dir) = &out.checkpoint_dir {
            if step % config.checkpoint_every == 0 || step == config.max_steps {
                trainer.checkpoint(net).save(&dir.join(checkpoint_name(step)))?;
            }
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
    }
    Ok(TrainReport {
        start_step,
        final_step: trainer.step(),
        losses,
    })
}
