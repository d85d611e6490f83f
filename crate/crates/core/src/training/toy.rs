//! One-dimensional densities with analytic scores, the explicit
//! score-matching error, and a small dense score model trained by DSM.

use itowave_nn::{backward, kaiming_uniform, Adam, AdamConfig, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::noise::{NoiseSource, SeededNoise};

pub trait ToyDensity {
    /// d/dx log p(x).
    fn score(&self, x: f64) -> f64;
    fn sample(&self, noise: &mut dyn NoiseSource) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1d {
    pub mean: f64,
    pub std: f64,
}

impl ToyDensity for Gaussian1d {
    fn score(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.std * self.std)
    }

    fn sample(&self, noise: &mut dyn NoiseSource) -> f64 {
        self.mean + self.std * noise.standard_normal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture1d {
    pub components: Vec<MixtureComponent>,
}

impl GaussianMixture1d {
    /// Equal-weight pair at ±`offset` with common `std`.
    pub fn symmetric_pair(offset: f64, std: f64) -> Self {
        Self {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: -offset,
                    std,
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: offset,
                    std,
                },
            ],
        }
    }

    /// The mixture convolved with N(0, sigma²).
    pub fn perturbed(&self, sigma: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|c| MixtureComponent {
                    std: (c.std * c.std + sigma * sigma).sqrt(),
                    ..*c
                })
                .collect(),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * normal_pdf(x, c.mean, c.std))
            .sum()
    }
}

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

impl ToyDensity for GaussianMixture1d {
    /// Responsibility-weighted component scores, computed with log-sum-exp
    /// so that far tails do not underflow.
    fn score(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.std;
                c.weight.ln() - c.std.ln() - 0.5 * z * z
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = ws.iter().sum();
        self.components
            .iter()
            .zip(&ws)
            .map(|(c, w)| w / total * (-(x - c.mean) / (c.std * c.std)))
            .sum()
    }

    fn sample(&self, noise: &mut dyn NoiseSource) -> f64 {
        let u = noise.uniform();
        let mut acc = 0.0;
        let last = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc || i == last {
                return c.mean + c.std * noise.standard_normal();
            }
        }
        unreachable!()
    }
}

/// Monte-Carlo estimate of E_p |score(x) − ∇log p(x)|² over `n` draws.
pub fn esm_validation(
    score: impl Fn(f64) -> f64,
    density: &dyn ToyDensity,
    n: usize,
    noise: &mut dyn NoiseSource,
) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let x = density.sample(noise);
        let d = score(x) - density.score(x);
        acc += d * d;
    }
    acc / n as f64
}

/// 1 → H → H → 1 tanh MLP.
#[derive(Debug, Clone)]
pub struct DenseScoreModel {
    params: ParamStore,
    layers: [(ParamId, ParamId); 3],
}

impl DenseScoreModel {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = [(hidden, 1), (hidden, hidden), (1, hidden)];
        let mut ids = Vec::new();
        for (i, &(o, inp)) in dims.iter().enumerate() {
            let w = params.add(format!("fc{i}.weight"), kaiming_uniform(&[o, inp], inp, &mut rng))?;
            let b = params.add(format!("fc{i}.bias"), Tensor::zeros(&[o]))?;
            ids.push((w, b));
        }
        Ok(Self {
            params,
            layers: [ids[0], ids[1], ids[2]],
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `x` is `[n, 1]`; returns `[n, 1]`.
    pub fn forward(&self, x: &Var, trainable: bool) -> Result<Var> {
        let mut h = x.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.linear(&self.params.bind(w, trainable), Some(&self.params.bind(b, trainable)))?;
            if i < 2 {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: f64) -> f64 {
        let v = Var::constant(Tensor::new(vec![1, 1], vec![x]).expect("shape"));
        self.forward(&v, false).expect("dense forward").value().data()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDsmConfig {
    /// Fixed perturbation scale.
    pub sigma: f64,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// ESM is evaluated every `eval_every` steps and after the last one.
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for ToyDsmConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            steps: 3000,
            batch: 256,
            hidden: 32,
            learning_rate: 3e-3,
            seed: 0,
            eval_every: 500,
            eval_samples: 20_000,
        }
    }
}

/// Fits a [`DenseScoreModel`] by DSM at a single noise scale: x = x₀ + σξ,
/// target −ξ/σ, loss ½(s(x) − target)². Returns the model and the ESM error
/// against the σ-perturbed data density at each evaluation point.
pub fn train_toy_dsm(data: &GaussianMixture1d, cfg: &ToyDsmConfig) -> Result<(DenseScoreModel, Vec<(usize, f64)>)> {
    let mut model = DenseScoreModel::new(cfg.hidden, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    })?;
    let marginal = data.perturbed(cfg.sigma);
    let mut noise = SeededNoise::stream(cfg.seed, 0);
    let eval = |m: &DenseScoreModel| {
        let mut en = SeededNoise::stream(cfg.seed, 1);
        esm_validation(|x| m.predict(x), &marginal, cfg.eval_samples, &mut en)
    };
    let mut history = vec![(0, eval(&model))];
    for step in 1..=cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x0 = data.sample(&mut noise);
            let xi = noise.standard_normal();
            xs.push(x0 + cfg.sigma * xi);
            ts.push(-xi / cfg.sigma);
        }
        let x = Var::constant(Tensor::new(vec![cfg.batch, 1], xs)?);
        let target = Var::constant(Tensor::new(vec![cfg.batch, 1], ts)?);
        let diff = model.forward(&x, true)?.sub(&target)?;
        let loss = diff.mul(&diff)?.scale(0.5).mean();
        let grads = backward(&loss)?;
        model.params.zero_grad();
        model.params.accumulate(&grads)?;
        adam.step(&mut model.params)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            history.push((step, eval(&model)));
        }
    }
    Ok((model, history))
}
