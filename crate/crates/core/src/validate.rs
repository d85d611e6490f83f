//! Self-contained analytic checks of the SDE, sampler and score matching,
//! runnable without data or a trained network.

use std::fmt::Write as _;

use itowave_nn::gradcheck::GradSample;
use itowave_nn::{backward, Tensor, Var};

use crate::error::Result;
use crate::features::FeatureConfig;
use crate::noise::{NoiseSource, SeededNoise};
use crate::sampler::{corrector_step, forward_simulate, generate_chain, EpsilonRule, SamplerConfig};
use crate::score_net::{ScoreNet, ScoreNetConfig};
use crate::sde::{log_prior, sample_prior, score_of_transition, SdeSpec};
use crate::stats::{ks_critical, ks_statistic, mean, normal_cdf, variance};
use crate::training::toy::{esm_validation, train_toy_dsm, Gaussian1d, GaussianMixture1d, ToyDsmConfig};
use crate::training::{dsm_loss, TrainingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when |measured − expected| ≤ tolerance.
    pub fn abs(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected,
            tolerance,
            passed: (measured - expected).abs() <= tolerance,
        }
    }

    /// Passes when |measured − expected| ≤ tolerance·|expected|.
    pub fn rel(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            passed: (measured - expected).abs() <= tolerance * expected.abs(),
            ..Self::abs(name, measured, expected, tolerance)
        }
    }

    /// Passes when measured ≤ bound.
    pub fn below(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected: bound,
            tolerance: 0.0,
            passed: measured <= bound,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("check\tmeasured\texpected\ttolerance\tresult\n");
        for c in &self.checks {
            writeln!(
                out,
                "{}\t{:.9e}\t{:.9e}\t{:.3e}\t{}",
                c.name,
                c.measured,
                c.expected,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

/// A transition-score implementation under test: (x_t, x0, t) → score.
pub type TransitionScore<'a> = &'a dyn Fn(&SdeSpec, &[f64], &[f64], f64) -> Result<Vec<f64>>;

/// Largest relative error between `score` and a central finite difference of
/// the Gaussian transition log-density over `n` random tuples. The error is
/// normalised by max(|analytic|, 1/√variance).
pub fn score_fd_error(spec: &SdeSpec, score: TransitionScore<'_>, n: usize, seed: u64) -> Result<f64> {
    let mut noise = SeededNoise::stream(seed, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = spec.t_min + (spec.t_max - spec.t_min) * noise.uniform();
        let v = spec.variance(t);
        let x0 = [0.5 * noise.standard_normal()];
        let xt = [x0[0] + 2.0 * v.sqrt() * noise.standard_normal()];
        let logp = |x: f64| -0.5 * (x - x0[0]).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let h = 1e-3 * v.sqrt();
        let fd = (logp(xt[0] + h) - logp(xt[0] - h)) / (2.0 * h);
        let s = score(spec, &xt, &x0, t)?[0];
        worst = worst.max((s - fd).abs() / s.abs().max(1.0 / v.sqrt()));
    }
    Ok(worst)
}

/// Largest relative gap between the closed-form variance and RK4 integration
/// of dV/dt = g(t)² on the grid t = j/`grid`, j = 1..=grid.
pub fn moment_ode_error(spec: &SdeSpec, grid: usize, substeps: usize) -> f64 {
    let mut v = 0.0;
    let mut t = 0.0;
    let mut worst: f64 = 0.0;
    for j in 1..=grid {
        let target = spec.t_max * j as f64 / grid as f64;
        let h = (target - t) / substeps as f64;
        for _ in 0..substeps {
            let k1 = spec.g2(t);
            let k2 = spec.g2(t + 0.5 * h);
            let k4 = spec.g2(t + h);
            v += h / 6.0 * (k1 + 4.0 * k2 + k4);
            t += h;
        }
        t = target;
        let exact = spec.variance(t);
        worst = worst.max((v - exact).abs() / exact);
    }
    worst
}

/// Sample variance of x(t) − x0 over `paths` scalar Euler–Maruyama paths.
pub fn forward_variance(spec: &SdeSpec, times: &[f64], paths: usize, seed: u64) -> Result<Vec<f64>> {
    let steps: Vec<usize> = times.iter().map(|t| (t / spec.dt()).round() as usize).collect();
    let traj = forward_simulate(spec, &vec![0.0; paths], &steps, &mut SeededNoise::stream(seed, 12))?;
    Ok(steps
        .iter()
        .map(|&s| {
            let x = &traj.at(s).expect("requested snapshot").state.x;
            x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
        })
        .collect())
}

/// Final states of `chains` corrector-only chains for the N(0, 1) score,
/// all started at x = 2.
pub fn langevin_chains(chains: usize, steps: usize, eps: f64, seed: u64) -> Result<Vec<f64>> {
    let cfg = SamplerConfig {
        epsilon_rule: EpsilonRule::Fixed,
        fixed_epsilon: eps,
        ..Default::default()
    };
    let score = |x: &[f64], _t: f64| Ok(x.iter().map(|v| -v).collect());
    let mut noise = SeededNoise::stream(seed, 13);
    // components evolve independently, so one state vector holds every chain
    let mut x = vec![2.0; chains];
    for _ in 0..steps {
        x = corrector_step(&x, 0.0, &score, &cfg, &mut noise)?;
    }
    Ok(x)
}

/// Final samples of `chains` independent d = 1 predictor-corrector chains
/// with the exact marginal score of an N(`mean`, `std`²) target.
pub fn gaussian_recovery(
    spec: &SdeSpec,
    config: &SamplerConfig,
    mean_: f64,
    std: f64,
    chains: usize,
) -> Result<Vec<f64>> {
    let s2 = std * std;
    let score = move |x: &[f64], t: f64| {
        let var = s2 + spec.variance(t);
        Ok(x.iter().map(|v| -(v - mean_) / var).collect())
    };
    (0..chains as u64)
        .map(|c| generate_chain(&score, 1, spec, config, c).map(|(x, _)| x[0]))
        .collect()
}

/// Settings for the Gaussian-recovery check: wide SDE, N = 1000, one fixed
/// corrector step per iteration.
pub fn recovery_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_steps: 1000,
        corrector_steps_per_iter: 1,
        epsilon_rule: EpsilonRule::Fixed,
        fixed_epsilon: 2e-4,
        seed,
        ..Default::default()
    }
}

/// Worst relative gap between backprop and central differences for a
/// 2-block desk-width network under the DSM loss, over `per_tensor` random
/// coordinates of every parameter tensor. The zero-initialised output layer
/// is randomised first so that every parameter receives gradient.
pub fn score_net_gradcheck(seed: u64, per_tensor: usize) -> Result<f64> {
    let spec = SdeSpec::wide();
    let fc = FeatureConfig::default();
    let cfg = ScoreNetConfig {
        residual_layers: 2,
        ..ScoreNetConfig::desk()
    };
    let mut net = ScoreNet::new(&cfg, &spec, &fc, seed)?;
    let mut noise = SeededNoise::stream(seed, 16);
    let head = net.params().find("head.1.weight").expect("output layer");
    let shape = net.params().get(head).value.shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = noise.standard_normal_vec(n).iter().map(|v| 0.2 * v).collect();
    net.params_mut().set_value("head.1.weight", Tensor::new(shape, w)?)?;

    let (b, frames) = (2, 2);
    let len = frames * fc.hop_length;
    let floor = fc.log_floor.ln();
    let mel: Vec<f64> = (0..b * cfg.mel_bins * frames)
        .map(|_| floor * noise.uniform())
        .collect();
    let mel = Tensor::new(vec![b, cfg.mel_bins, frames], mel)?;
    let x = Tensor::new(vec![b, 1, len], noise.standard_normal_vec(b * len))?;
    let target = Tensor::new(vec![b, 1, len], noise.standard_normal_vec(b * len))?;
    let t = [0.3, 0.7];
    let train = TrainingConfig::default();
    let loss = |net: &ScoreNet, trainable: bool| -> Result<Var> {
        let pred = net.forward(&Var::constant(x.clone()), &t, &Var::constant(mel.clone()), trainable)?;
        dsm_loss(&pred, &target, &t, &spec, &train)
    };

    let grads = backward(&loss(&net, true)?)?;
    let ids: Vec<_> = net.params().ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for _ in 0..per_tensor {
            let size = net.params().get(id).value.len();
            let i = ((noise.uniform() * size as f64) as usize).min(size - 1);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let orig = net.params().get(id).value.data()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            net.params_mut().get_mut(id).value.data_mut()[i] = orig + h;
            let up = loss(&net, false)?.value().data()[0];
            net.params_mut().get_mut(id).value.data_mut()[i] = orig - h;
            let down = loss(&net, false)?.value().data()[0];
            net.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let s = GradSample {
                analytic,
                numeric: (up - down) / (2.0 * h),
            };
            worst = worst.max(s.relative_error(1e-7));
        }
    }
    Ok(worst)
}

pub const RECOVERY_MEAN: f64 = 0.1;
pub const RECOVERY_STD: f64 = 0.2;

/// Runs the whole battery.
pub fn run_battery(seed: u64) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let paper = SdeSpec::paper();
    let wide = SdeSpec::wide();

    let fd = score_fd_error(&paper, &|s, xt, x0, t| score_of_transition(s, xt, x0, t), 1000, seed)?;
    checks.push(CheckResult::below("score_finite_difference", fd, 1e-5));

    for (name, spec) in [("paper", &paper), ("wide", &wide)] {
        let e = moment_ode_error(spec, 100, 100);
        checks.push(CheckResult::below(format!("moment_ode_{name}"), e, 1e-8));
    }

    let times = [0.25, 0.5, 1.0];
    for (t, v) in times.iter().zip(forward_variance(&paper, &times, 10_000, seed)?) {
        checks.push(CheckResult::rel(
            format!("forward_variance_t{t}"),
            v,
            paper.variance(*t),
            0.05,
        ));
    }

    let n = 100_000;
    let x = langevin_chains(n, 2000, 0.01, seed)?;
    let d = ks_statistic(&x, |v| normal_cdf(v, 0.0, 1.0));
    checks.push(CheckResult::below("langevin_ks_statistic", d, ks_critical(n, 0.01)));

    let samples = gaussian_recovery(&wide, &recovery_sampler(seed), RECOVERY_MEAN, RECOVERY_STD, 10_000)?;
    checks.push(CheckResult::abs("recovery_mean", mean(&samples), RECOVERY_MEAN, 0.02));
    checks.push(CheckResult::rel(
        "recovery_variance",
        variance(&samples),
        RECOVERY_STD * RECOVERY_STD,
        0.05,
    ));

    let mut noise = SeededNoise::stream(seed, 14);
    let n = 100_000;
    let unit = Gaussian1d { mean: 0.0, std: 1.0 };
    let e = esm_validation(|_| 0.0, &unit, n, &mut noise);
    checks.push(CheckResult::abs(
        "esm_zero_predictor",
        e,
        1.0,
        3.0 * (2.0 / n as f64).sqrt(),
    ));

    let unit_prior = SdeSpec { sigma1: 1.0, ..paper };
    checks.push(CheckResult::abs(
        "log_prior_at_origin",
        log_prior(&unit_prior, &[0.0]),
        -0.5 * (2.0 * std::f64::consts::PI).ln(),
        1e-12,
    ));
    let draws = sample_prior(&wide, n, &mut SeededNoise::stream(seed, 15));
    checks.push(CheckResult::abs(
        "prior_variance",
        variance(&draws),
        1.0,
        3.0 * (2.0 / n as f64).sqrt(),
    ));

    let mixture = GaussianMixture1d::symmetric_pair(1.0, 0.3);
    let (_, history) = train_toy_dsm(
        &mixture,
        &ToyDsmConfig {
            seed,
            ..Default::default()
        },
    )?;
    let last = history.last().expect("history").1;
    checks.push(CheckResult::below("toy_dsm_esm_error", last, 0.05));

    Ok(ValidationReport { checks })
}
