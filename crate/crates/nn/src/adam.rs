//! Adam with bias correction.

use crate::error::{NnError, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Usage(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// Optimizer state shared across parameters; per-parameter moments live in
/// [`crate::Parameter`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step_count: 0 })
    }

    /// Applies one update from the accumulated gradients. Gradients are
    /// checked before any value is touched, so a failed step leaves the store
    /// unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.gradient.all_finite()) {
            return Err(NnError::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step_count as i32);
        let c2 = 1.0 - b2.powi(self.step_count as i32);
        for p in store.iter_mut() {
            let g = p.gradient.data();
            let m = p.adam_m.data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
            let v = p.adam_v.data_mut();
            for (v, &g) in v.iter_mut().zip(p.gradient.data()) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            for ((w, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s
            .add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s.get_mut(id).gradient = Tensor::new(vec![grads.len()], grads.to_vec()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_value_and_decays_moments() {
        let mut s = store_with(&[1.0, -1.0], &[0.0, 0.0]);
        s.iter_mut().next().unwrap().adam_m = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let before = s.iter().next().unwrap().value.clone();
        // nonzero first moment moves the value, so isolate the decay check
        adam.step(&mut s).unwrap();
        let p = s.iter().next().unwrap();
        assert!(p.adam_m.data().iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert_eq!(adam.step_count, 1);

        let mut s = store_with(&[1.0, -1.0], &[0.0, 0.0]);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let g = [3.0, -0.02, 1e-3];
        let mut s = store_with(&[0.0; 3], &g);
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        adam.step(&mut s).unwrap();
        // m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps)
        for (w, g) in s.iter().next().unwrap().value.data().iter().zip(g) {
            let expected = -1e-2 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store_with(&[0.0], &[f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let err = adam.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("parameter p"), "{err}");
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = AdamConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(Adam::new(bad).is_err());
    }
}
