//! Reverse-time generation: Euler–Maruyama predictor on the reverse SDE
//! followed by Langevin corrector steps, from prior noise to a waveform.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MelSpectrogram, Waveform};
use crate::noise::{NoiseSource, SeededNoise};
use crate::score_net::{MelCondition, ScoreNet};
use crate::sde::{sample_prior, DiffusionState, SdeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    SnrAdaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub corrector_steps_per_iter: usize,
    pub snr: f64,
    pub epsilon_rule: EpsilonRule,
    pub fixed_epsilon: f64,
    pub seed: u64,
    /// Reverse iterations completed at which to record the state: 0 is the
    /// prior draw and `n_steps` the final waveform.
    pub snapshot_steps: Vec<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            corrector_steps_per_iter: 1,
            snr: 0.16,
            epsilon_rule: EpsilonRule::SnrAdaptive,
            fixed_epsilon: 1e-6,
            seed: 0,
            snapshot_steps: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sample: {m}")));
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if !(self.fixed_epsilon > 0.0 && self.fixed_epsilon.is_finite()) {
            return bad(format!("fixed_epsilon must be positive, got {}", self.fixed_epsilon));
        }
        if let Some(&s) = self.snapshot_steps.iter().find(|&&s| s > self.n_steps) {
            return bad(format!("snapshot step {s} exceeds n_steps {}", self.n_steps));
        }
        Ok(())
    }

    pub fn dt(&self, spec: &SdeSpec) -> f64 {
        spec.t_max / self.n_steps as f64
    }
}

/// A score model s(x, t).
pub trait ScoreFn {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self(x, t)
    }
}

/// A frozen network with a precomputed mel condition.
pub struct ConditionedNet<'a> {
    pub net: &'a ScoreNet,
    pub cond: MelCondition,
}

impl ScoreFn for ConditionedNet<'_> {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.score(&self.cond, x, t)
    }
}

fn checked_score(score: &dyn ScoreFn, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let s = score.score(x, t)?;
    if s.len() != x.len() {
        return Err(Error::Shape(format!(
            "score has {} dims, state has {}",
            s.len(),
            x.len()
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Iterations completed when the state was recorded.
    pub step: usize,
    pub state: DiffusionState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn at(&self, step: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    /// Rows of (step, rms, min, max, high-frequency rms).
    pub fn stats(&self) -> Vec<SnapshotStats> {
        self.snapshots
            .iter()
            .map(|s| SnapshotStats::of(s.step, &s.state.x))
            .collect()
    }

    pub fn stats_tsv(&self) -> String {
        let mut out = String::from("step\trms\tmin\tmax\thf_rms\n");
        for r in self.stats() {
            writeln!(out, "{}\t{:e}\t{:e}\t{:e}\t{:e}", r.step, r.rms, r.min, r.max, r.hf_rms).unwrap();
        }
        out
    }

    pub fn write_stats(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.stats_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotStats {
    pub step: usize,
    pub rms: f64,
    pub min: f64,
    pub max: f64,
    pub hf_rms: f64,
}

impl SnapshotStats {
    pub fn of(step: usize, x: &[f64]) -> Self {
        let n = x.len() as f64;
        Self {
            step,
            rms: (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            min: x.iter().copied().fold(f64::INFINITY, f64::min),
            max: x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            hf_rms: high_frequency_rms(x),
        }
    }
}

/// RMS of the half first difference (x[i] − x[i−1])/2: unit gain at Nyquist,
/// zero at DC, so white noise dominates it while voiced speech barely does.
pub fn high_frequency_rms(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let s: f64 = x.windows(2).map(|w| 0.25 * (w[1] - w[0]) * (w[1] - w[0])).sum();
    (s / (x.len() - 1) as f64).sqrt()
}

/// Forward Euler–Maruyama of the driftless SDE on the `spec.n_steps` grid:
/// x_{i+1} = x_i + g(iΔt)·√Δt·ξ. Snapshots are taken after `i` steps for
/// each `i` in `snapshot_steps`; the final state is always included.
pub fn forward_simulate(
    spec: &SdeSpec,
    x0: &[f64],
    snapshot_steps: &[usize],
    noise: &mut dyn NoiseSource,
) -> Result<Trajectory> {
    spec.validate()?;
    let dt = spec.dt();
    let n = spec.n_steps;
    let mut x = x0.to_vec();
    let mut traj = Trajectory::default();
    let record = |traj: &mut Trajectory, i: usize, x: &[f64]| {
        if snapshot_steps.contains(&i) || i == n {
            traj.snapshots.push(Snapshot {
                step: i,
                state: DiffusionState {
                    x: x.to_vec(),
                    t: i as f64 * dt,
                },
            });
        }
    };
    record(&mut traj, 0, &x);
    for i in 0..n {
        let amp = spec.g2(i as f64 * dt).sqrt() * dt.sqrt();
        for v in x.iter_mut() {
            *v += amp * noise.standard_normal();
        }
        record(&mut traj, i + 1, &x);
    }
    Ok(traj)
}

/// One reverse Euler–Maruyama step from t_{k+1} = (k+1)Δt to t_k:
/// x + g(t_{k+1})²·s(x, t_{k+1})·Δt + g(t_{k+1})·√Δt·ξ.
pub fn predictor_step(
    x: &[f64],
    k: usize,
    dt: f64,
    spec: &SdeSpec,
    score: &dyn ScoreFn,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    let t = (k + 1) as f64 * dt;
    spec.check_time(t)?;
    let s = checked_score(score, x, t)?;
    let g2 = spec.g2(t);
    let amp = (g2 * dt).sqrt();
    Ok(x.iter()
        .zip(&s)
        .map(|(&xi, &si)| xi + g2 * si * dt + amp * noise.standard_normal())
        .collect())
}

/// Langevin step at time `t`: x + ε·s + √(2ε)·ξ. Under the snr-adaptive rule
/// ε = 2(snr·‖ξ‖/‖s‖)², falling back to `fixed_epsilon` when ‖s‖ = 0.
pub fn corrector_step(
    x: &[f64],
    t: f64,
    score: &dyn ScoreFn,
    config: &SamplerConfig,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<f64>> {
    let s = checked_score(score, x, t)?;
    let xi = noise.standard_normal_vec(x.len());
    let eps = match config.epsilon_rule {
        EpsilonRule::Fixed => config.fixed_epsilon,
        EpsilonRule::SnrAdaptive => {
            let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nn = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if sn > 0.0 {
                2.0 * (config.snr * nn / sn).powi(2)
            } else {
                config.fixed_epsilon
            }
        }
    };
    let amp = (2.0 * eps).sqrt();
    Ok(x.iter()
        .zip(&s)
        .zip(&xi)
        .map(|((&a, &b), &z)| a + eps * b + amp * z)
        .collect())
}

/// Runs the reverse loop from `x_init` at t = T. Returns the final state and
/// the requested snapshots.
pub fn generate_from(
    x_init: Vec<f64>,
    score: &dyn ScoreFn,
    spec: &SdeSpec,
    config: &SamplerConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(Vec<f64>, Trajectory)> {
    spec.validate()?;
    config.validate()?;
    let n = config.n_steps;
    let dt = config.dt(spec);
    let mut traj = Trajectory::default();
    let mut x = x_init;
    let record = |traj: &mut Trajectory, step: usize, x: &[f64]| {
        if config.snapshot_steps.contains(&step) || step == n {
            traj.snapshots.push(Snapshot {
                step,
                state: DiffusionState {
                    x: x.to_vec(),
                    t: (n - step) as f64 * dt,
                },
            });
        }
    };
    record(&mut traj, 0, &x);
    for (done, k) in (0..n).rev().enumerate() {
        let step = done + 1;
        x = predictor_step(&x, k, dt, spec, score, noise)?;
        let t = k as f64 * dt;
        for _ in 0..config.corrector_steps_per_iter {
            x = corrector_step(&x, t, score, config, noise)?;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step,
                msg: format!("state component {i} is {} at t = {t}", x[i]),
            });
        }
        record(&mut traj, step, &x);
    }
    Ok((x, traj))
}

/// One chain of dimension `d` started from the prior, with noise stream
/// `(config.seed, chain)`.
pub fn generate_chain(
    score: &dyn ScoreFn,
    d: usize,
    spec: &SdeSpec,
    config: &SamplerConfig,
    chain: u64,
) -> Result<(Vec<f64>, Trajectory)> {
    let mut noise = SeededNoise::stream(config.seed, chain);
    let x = sample_prior(spec, d, &mut noise);
    generate_from(x, score, spec, config, &mut noise)
}

/// Generates a waveform of `mel.n_frames · hop` samples conditioned on an
/// aligned mel.
pub fn generate(
    mel: &MelSpectrogram,
    net: &ScoreNet,
    features: &FeatureConfig,
    config: &SamplerConfig,
) -> Result<(Waveform, Trajectory)> {
    mel.check_fingerprint(features)?;
    let len = mel.n_frames * features.hop_length;
    let cond = net.condition(mel, len)?;
    let score = ConditionedNet { net, cond };
    let (x, traj) = generate_chain(&score, len, net.sde(), config, 0)?;
    Ok((Waveform::new(x, features.sample_rate)?, traj))
}
