//! Variance-exploding linear SDE: coefficients, closed-form transition
//! moments, transition scores and the Gaussian prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseSource;

/// Relative slack when checking `t <= t_max`, so that `k * dt` on the
/// discretisation grid is never rejected by rounding.
const T_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSpec {
    pub sigma0: f64,
    pub sigma1: f64,
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
}

impl Default for SdeSpec {
    fn default() -> Self {
        Self::wide()
    }
}

impl SdeSpec {
    /// σ₁ = σ₀·√e, so that 2 ln(σ₁/σ₀) = 1.
    pub fn paper() -> Self {
        Self {
            sigma0: 0.01,
            sigma1: 0.01 * 0.5f64.exp(),
            t_max: 1.0,
            t_min: 1e-5,
            n_steps: 1000,
        }
    }

    pub fn wide() -> Self {
        Self {
            sigma1: 1.0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sde: {m}")));
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 must be positive, got {}", self.sigma0));
        }
        if !(self.sigma1 > self.sigma0 && self.sigma1.is_finite()) {
            return bad(format!("sigma1 ({}) must exceed sigma0 ({})", self.sigma1, self.sigma0));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return bad(format!("t_min ({}) must lie in (0, t_max)", self.t_min));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.n_steps as f64
    }

    pub fn log_ratio(&self) -> f64 {
        (self.sigma1 / self.sigma0).ln()
    }

    /// Noise scale σ(t) = σ₀(σ₁/σ₀)^t; σ(t)² = variance(t) + σ₀².
    pub fn noise_scale(&self, t: f64) -> f64 {
        self.sigma0 * (t * self.log_ratio()).exp()
    }

    /// Transition variance without the domain check.
    pub fn variance(&self, t: f64) -> f64 {
        self.sigma0 * self.sigma0 * (2.0 * t * self.log_ratio()).exp_m1()
    }

    /// g(t)² without the domain check.
    pub fn g2(&self, t: f64) -> f64 {
        let s = self.noise_scale(t);
        2.0 * s * s * self.log_ratio()
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.t_max * (1.0 + T_SLACK) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.t_max,
            })
        }
    }

    fn check_train_time(&self, t: f64) -> Result<()> {
        self.check_time(t)?;
        if t < self.t_min {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: self.t_min,
                hi: self.t_max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMoments {
    pub mean_shift: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// dx = f(x, t) dt + g(t) dw with Gaussian transitions.
pub trait LinearSde {
    fn t_max(&self) -> f64;
    fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn diffusion_coeff(&self, t: f64) -> Result<f64>;
    fn transition_moments(&self, t: f64) -> Result<TransitionMoments>;
}

impl LinearSde for SdeSpec {
    fn t_max(&self) -> f64 {
        self.t_max
    }

    fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        Ok(vec![0.0; x.len()])
    }

    fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.g2(t).sqrt())
    }

    fn transition_moments(&self, t: f64) -> Result<TransitionMoments> {
        self.check_time(t)?;
        Ok(TransitionMoments {
            mean_shift: 1.0,
            variance: self.variance(t),
        })
    }
}

/// Draws x_t ~ p(x_t | x0) and returns it with the transition score at x_t.
pub fn sample_transition(
    spec: &SdeSpec,
    x0: &[f64],
    t: f64,
    noise: &mut dyn NoiseSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.check_train_time(t)?;
    let var = spec.variance(t);
    let std = var.sqrt();
    let x_t: Vec<f64> = x0.iter().map(|&x| x + std * noise.standard_normal()).collect();
    let target = x_t.iter().zip(x0).map(|(&xt, &x)| -(xt - x) / var).collect();
    Ok((x_t, target))
}

/// ∇ log p(x_t | x0) = −(x_t − x0) / variance(t).
pub fn score_of_transition(spec: &SdeSpec, x_t: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    spec.check_train_time(t)?;
    if x_t.len() != x0.len() {
        return Err(Error::Shape(format!("x_t has {} dims, x0 has {}", x_t.len(), x0.len())));
    }
    let var = spec.variance(t);
    Ok(x_t.iter().zip(x0).map(|(&xt, &x)| -(xt - x) / var).collect())
}

pub fn sample_prior(spec: &SdeSpec, d: usize, noise: &mut dyn NoiseSource) -> Vec<f64> {
    (0..d).map(|_| spec.sigma1 * noise.standard_normal()).collect()
}

pub fn log_prior(spec: &SdeSpec, x: &[f64]) -> f64 {
    let s2 = spec.sigma1 * spec.sigma1;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln() - sq / (2.0 * s2)
}

pub fn prior_score(spec: &SdeSpec, x: &[f64]) -> Vec<f64> {
    let s2 = spec.sigma1 * spec.sigma1;
    x.iter().map(|v| -v / s2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ZeroNoise;

    #[test]
    fn presets_validate() {
        SdeSpec::paper().validate().unwrap();
        SdeSpec::wide().validate().unwrap();
        let mut s = SdeSpec::paper();
        s.sigma1 = s.sigma0;
        assert!(s.validate().is_err());
        let mut s = SdeSpec::paper();
        s.t_min = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn domain_errors() {
        let s = SdeSpec::paper();
        assert!(s.diffusion_coeff(-0.1).is_err());
        assert!(s.diffusion_coeff(1.5).is_err());
        assert!(s.drift(&[1.0], 2.0).is_err());
        assert!(s.transition_moments(1.0 + 1e-15).is_ok());
        assert!(sample_transition(&s, &[0.0], 1e-6, &mut ZeroNoise).is_err());
        assert!(score_of_transition(&s, &[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn drift_is_zero() {
        let s = SdeSpec::paper();
        assert_eq!(s.drift(&[1.0, 2.0, 3.0], 0.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_noise_transition() {
        let s = SdeSpec::wide();
        let (xt, target) = sample_transition(&s, &[0.3, -0.2], 0.5, &mut ZeroNoise).unwrap();
        assert_eq!(xt, vec![0.3, -0.2]);
        assert_eq!(target, vec![0.0, 0.0]);
    }
}
