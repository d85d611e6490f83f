use itowave::noise::{NoiseSource, SeededNoise};
use itowave::sde::{log_prior, prior_score, sample_prior, sample_transition, score_of_transition, LinearSde, SdeSpec};
use itowave::stats::{mean, variance};
use itowave::validate::{moment_ode_error, score_fd_error};
use proptest::prelude::*;

#[test]
fn diffusion_coefficient_values() {
    let s = SdeSpec::paper();
    assert!((s.diffusion_coeff(0.0).unwrap() - 0.01).abs() < 1e-12);
    let g1 = 0.01 * 0.5f64.exp();
    assert!((s.diffusion_coeff(1.0).unwrap() - g1).abs() < 1e-12);
    assert!((g1 - 0.016487).abs() < 1e-6);
}

#[test]
fn variance_values() {
    let s = SdeSpec::paper();
    let v1 = s.transition_moments(1.0).unwrap();
    assert_eq!(v1.mean_shift, 1.0);
    assert!((v1.variance - 1e-4 * (1f64.exp() - 1.0)).abs() < 1e-18);
    assert!((v1.variance - 1.71828e-4).abs() < 1e-9);
    assert!((s.variance(0.5) - 6.4872e-5).abs() < 1e-9);
    assert_eq!(s.variance(0.0), 0.0);
    let w = SdeSpec::wide();
    assert!((w.variance(1.0) - (1.0 - 1e-4)).abs() < 1e-14);
}

#[test]
fn score_matches_finite_differences() {
    for spec in [SdeSpec::paper(), SdeSpec::wide()] {
        let e = score_fd_error(&spec, &|s, xt, x0, t| score_of_transition(s, xt, x0, t), 1000, 3).unwrap();
        assert!(e < 1e-5, "{e:e}");
    }
}

#[test]
fn closed_form_variance_solves_the_moment_ode() {
    assert!(moment_ode_error(&SdeSpec::paper(), 100, 100) < 1e-8);
}

#[test]
fn riemann_sum_of_g2_converges_to_variance() {
    let s = SdeSpec::paper();
    let exact = s.variance(1.0);
    let errs: Vec<f64> = [10usize, 100, 1000]
        .iter()
        .map(|&n| {
            let dt = 1.0 / n as f64;
            let sum: f64 = (0..n).map(|i| s.g2(i as f64 * dt) * dt).sum();
            (sum - exact).abs() / exact
        })
        .collect();
    // left sums of an increasing exponential converge at first order
    assert!(errs[0] > errs[1] && errs[1] > errs[2]);
    assert!(errs[1] / errs[2] > 9.0 && errs[1] / errs[2] < 11.0, "{errs:?}");
    assert!(errs[2] < 1e-3);
}

#[test]
fn monte_carlo_transition_moments() {
    let s = SdeSpec::paper();
    let n = 100_000;
    let x0 = vec![0.25; n];
    for t in [0.1, 0.5, 1.0] {
        let (xt, target) = sample_transition(&s, &x0, t, &mut SeededNoise::new(7)).unwrap();
        let v = s.variance(t);
        assert!((mean(&xt) - 0.25).abs() < 4.0 * (v / n as f64).sqrt());
        assert!((variance(&xt) / v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        for ((a, b), c) in xt.iter().zip(&x0).zip(&target) {
            assert_eq!(*c, -(a - b) / v);
        }
    }
}

#[test]
fn prior_moments_and_density() {
    let s = SdeSpec::wide();
    let n = 100_000;
    let x = sample_prior(&s, n, &mut SeededNoise::new(2));
    assert!(mean(&x).abs() < 4.0 / (n as f64).sqrt());
    assert!((variance(&x) - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    let p = SdeSpec::paper();
    let s2 = p.sigma1 * p.sigma1;
    let lp = log_prior(&p, &[0.0, 0.01]);
    let want = -(2.0 * std::f64::consts::PI * s2).ln() - 0.0001 / (2.0 * s2);
    assert!((lp - want).abs() < 1e-12 * want.abs());
    assert_eq!(prior_score(&s, &[2.0, -1.0]), vec![-2.0, 1.0]);
}

#[test]
fn seeded_noise_streams_are_reproducible_and_distinct() {
    let a = SeededNoise::stream(5, 1).standard_normal_vec(8);
    assert_eq!(a, SeededNoise::stream(5, 1).standard_normal_vec(8));
    assert_ne!(a, SeededNoise::stream(5, 2).standard_normal_vec(8));
    assert_ne!(a, SeededNoise::stream(6, 1).standard_normal_vec(8));
}

proptest! {
    #[test]
    fn variance_relations(t in 0.0f64..1.0, s1 in 0.02f64..5.0) {
        let s = SdeSpec { sigma1: s1, ..SdeSpec::paper() };
        let v = s.variance(t);
        prop_assert!(v >= 0.0);
        let sig = s.noise_scale(t);
        prop_assert!((sig * sig - s.sigma0 * s.sigma0 - v).abs() <= 1e-12 * sig * sig);
        // g² is the time derivative of the variance
        let h = 1e-6;
        let fd = (s.variance(t + h) - s.variance((t - h).max(0.0))) / (t + h - (t - h).max(0.0));
        prop_assert!((fd - s.g2(t)).abs() <= 1e-5 * s.g2(t));
        prop_assert!(s.variance((t + 0.01).min(1.0)) >= v);
    }

    #[test]
    fn transition_score_is_linear_and_zero_at_mean(
        x0 in proptest::collection::vec(-1.0f64..1.0, 1..6),
        shift in -0.5f64..0.5,
        t in 1e-3f64..1.0,
    ) {
        let s = SdeSpec::wide();
        prop_assert!(score_of_transition(&s, &x0, &x0, t).unwrap().iter().all(|&v| v == 0.0));
        let xt: Vec<f64> = x0.iter().map(|v| v + shift).collect();
        let sc = score_of_transition(&s, &xt, &x0, t).unwrap();
        for v in sc {
            prop_assert!((v * s.variance(t) + shift).abs() < 1e-12);
        }
    }
}
