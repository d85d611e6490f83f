use itowave::features::{FeatureConfig, MelSpectrogram};
use itowave::noise::{NoiseSource, SeededNoise, ZeroNoise};
use itowave::score_net::{ScoreNet, ScoreNetConfig};
use itowave::sde::{sample_transition, score_of_transition, SdeSpec};
use itowave::stats::{ks_critical, ks_statistic};
use itowave::training::toy::{train_toy_dsm, GaussianMixture1d, ToyDsmConfig};
use itowave::training::{
    dsm_loss, make_example, train, LossNorm, LossWeighting, TrainOutput, Trainer, TrainingClip, TrainingConfig,
    METRICS_HEADER,
};
use itowave::Error;
use itowave_nn::{Checkpoint, Tensor, Var};

const HOP: usize = 16;

fn tiny_net(seed: u64) -> ScoreNet {
    let cfg = ScoreNetConfig {
        residual_layers: 2,
        residual_channels: 4,
        skip_channels: 4,
        dilation_cycle: 2,
        kernel_size: 3,
        mel_bins: 8,
        upsample_strides: [4, 4],
        time_embed_dim: 8,
    };
    ScoreNet::new(&cfg, &SdeSpec::wide(), &tiny_features(), seed).unwrap()
}

fn tiny_features() -> FeatureConfig {
    FeatureConfig {
        hop_length: HOP,
        n_mels: 8,
        n_fft: 64,
        win_length: 64,
        ..Default::default()
    }
}

fn clip(frames: usize, seed: u64) -> TrainingClip {
    let mut n = SeededNoise::new(seed);
    let x = (0..frames * HOP)
        .map(|i| 0.3 * (i as f64 * 0.4).sin() + 0.02 * n.standard_normal())
        .collect();
    let mel = (0..frames * 8).map(|_| -8.0 * n.uniform()).collect();
    let mel = MelSpectrogram::new(mel, frames, 8, tiny_features().fingerprint()).unwrap();
    TrainingClip::new(x, mel, HOP).unwrap()
}

fn tiny_train(steps: u64) -> TrainingConfig {
    let mut c = TrainingConfig {
        batch_size: 2,
        segment_length: 2 * HOP,
        max_steps: steps,
        checkpoint_every: 3,
        seed: 11,
        ..Default::default()
    };
    c.adam.learning_rate = 1e-3;
    c
}

fn values(net: &ScoreNet) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn zero_noise_example_is_unperturbed() {
    let c = clip(2, 0);
    let e = make_example(&c.samples, &c.mel, &SdeSpec::wide(), HOP, &mut ZeroNoise).unwrap();
    assert_eq!(e.x_t, c.samples);
    assert!(e.target.iter().all(|&v| v == 0.0));
    // ZeroNoise draws uniform 0.5
    assert_eq!(e.t, 1e-5 + (1.0 - 1e-5) * 0.5);
}

#[test]
fn training_times_are_uniform() {
    let spec = SdeSpec::wide();
    let c = clip(1, 0);
    let mut noise = SeededNoise::new(4);
    let n = 100_000;
    let ts: Vec<f64> = (0..n)
        .map(|_| make_example(&c.samples, &c.mel, &spec, HOP, &mut noise).unwrap().t)
        .collect();
    assert!(ts.iter().all(|&t| t >= spec.t_min && t <= spec.t_max));
    let d = ks_statistic(&ts, |t| ((t - spec.t_min) / (spec.t_max - spec.t_min)).clamp(0.0, 1.0));
    assert!(d < ks_critical(n, 0.01), "KS {d}");
}

#[test]
fn target_is_the_transition_score() {
    let spec = SdeSpec::paper();
    let c = clip(3, 1);
    let mut noise = SeededNoise::new(9);
    for _ in 0..20 {
        let e = make_example(&c.samples, &c.mel, &spec, HOP, &mut noise).unwrap();
        assert_eq!(e.target, score_of_transition(&spec, &e.x_t, &e.x0, e.t).unwrap());
    }
    let bad = make_example(&c.samples[1..], &c.mel, &spec, HOP, &mut noise);
    assert!(matches!(bad, Err(Error::Alignment { .. })));
}

#[test]
fn zero_predictor_loss() {
    let spec = SdeSpec::wide();
    let cfg = TrainingConfig::default();
    let mut noise = SeededNoise::new(3);
    let (b, d) = (64, 512);
    let x0 = vec![0.0; d];
    let mut targets = Vec::new();
    let mut ts = Vec::new();
    for _ in 0..b {
        let t = spec.t_min + (1.0 - spec.t_min) * noise.uniform();
        targets.extend(sample_transition(&spec, &x0, t, &mut noise).unwrap().1);
        ts.push(t);
    }
    let target = Tensor::new(vec![b, d], targets.clone()).unwrap();
    let zero = Var::constant(Tensor::zeros(&[b, d]));
    let loss = dsm_loss(&zero, &target, &ts, &spec, &cfg).unwrap().value().data()[0];
    let direct: f64 = targets
        .chunks(d)
        .zip(&ts)
        .flat_map(|(row, &t)| row.iter().map(move |v| 0.5 * spec.variance(t) * v * v))
        .sum::<f64>()
        / (b * d) as f64;
    assert!((loss - direct).abs() < 1e-12 * direct);
    // variance-weighted targets are unit normals, so the expectation is 1/2
    let n = (b * d) as f64;
    assert!((loss - 0.5).abs() < 4.0 * (0.5 / n).sqrt(), "{loss}");
}

#[test]
fn l1_and_unweighted_losses() {
    let spec = SdeSpec::wide();
    let pred = Var::constant(Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap());
    let target = Tensor::new(vec![2, 1], vec![0.5, 1.0]).unwrap();
    let t = [0.3, 0.8];
    let get = |norm, w| {
        let c = TrainingConfig {
            loss_norm: norm,
            loss_weighting: w,
            ..Default::default()
        };
        dsm_loss(&pred, &target, &t, &spec, &c).unwrap().value().data()[0]
    };
    assert_eq!(get(LossNorm::L1, LossWeighting::None), (0.5 + 3.0) / 2.0);
    assert_eq!(get(LossNorm::L2, LossWeighting::None), (0.125 + 4.5) / 2.0);
    let want = (0.5 * spec.variance(0.3).sqrt() + 3.0 * spec.variance(0.8).sqrt()) / 2.0;
    assert!((get(LossNorm::L1, LossWeighting::Variance) - want).abs() < 1e-15);
}

#[test]
fn dsm_optimum_is_the_marginal_score() {
    // data N(0, s²) perturbed at variance v has score −x/(s² + v); the
    // least-squares slope regressing the transition score on x_t recovers it
    let spec = SdeSpec::wide();
    let s = 0.3;
    let t = 0.6;
    let v = spec.variance(t);
    let mut noise = SeededNoise::new(21);
    let n = 200_000;
    let x0: Vec<f64> = (0..n).map(|_| s * noise.standard_normal()).collect();
    let (xt, target) = sample_transition(&spec, &x0, t, &mut noise).unwrap();
    let sxy: f64 = xt.iter().zip(&target).map(|(a, b)| a * b).sum();
    let sxx: f64 = xt.iter().map(|a| a * a).sum();
    let slope = sxy / sxx;
    let want = -1.0 / (s * s + v);
    assert!((slope / want - 1.0).abs() < 0.02, "{slope} vs {want}");
}

#[test]
fn empty_dataset_is_a_config_error() {
    let mut net = tiny_net(0);
    let err = train(&[], &mut net, &SdeSpec::wide(), &tiny_train(2), &TrainOutput::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("empty"));
}

#[test]
fn short_clip_is_a_data_error() {
    let mut net = tiny_net(0);
    let mut cfg = tiny_train(2);
    cfg.segment_length = 8 * HOP;
    let err = train(&[clip(4, 0)], &mut net, &SdeSpec::wide(), &cfg, &TrainOutput::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = [clip(6, 1), clip(5, 2)];
    let spec = SdeSpec::wide();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, steps: &[u64]| {
        let out = TrainOutput {
            checkpoint_dir: Some(dir.path().join(name)),
            metrics_path: Some(dir.path().join(format!("{name}.tsv"))),
        };
        std::fs::create_dir_all(dir.path().join(name)).unwrap();
        let mut params = Vec::new();
        for &s in steps {
            let mut net = tiny_net(3);
            train(&data, &mut net, &spec, &tiny_train(s), &out).unwrap();
            params = values(&net);
        }
        let metrics = std::fs::read_to_string(out.metrics_path.unwrap()).unwrap();
        let losses: Vec<String> = metrics
            .lines()
            .map(|l| l.split('\t').take(3).collect::<Vec<_>>().join("\t"))
            .collect();
        (params, losses)
    };
    let straight = run("a", &[7]);
    assert_eq!(straight, run("b", &[7]));
    assert_eq!(straight, run("c", &[4, 7]));
    assert_eq!(straight.1[0], METRICS_HEADER.rsplit_once('\t').unwrap().0);
    assert_eq!(straight.1.len(), 8);
    assert!(straight.1[1].starts_with("1\t"));

    let names: Vec<String> = {
        let mut v: Vec<String> = std::fs::read_dir(dir.path().join("a"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names, vec!["step_3.ckpt", "step_6.ckpt", "step_7.ckpt"]);
    let ck = Checkpoint::load(&dir.path().join("a/step_7.ckpt")).unwrap();
    let mut net = tiny_net(50);
    let mut trainer = Trainer::new(&spec, &tiny_train(7), HOP).unwrap();
    trainer.resume(&mut net, &ck).unwrap();
    assert_eq!(trainer.step(), 7);
    assert_eq!(values(&net), straight.0);
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let data = [clip(6, 1)];
    let t = Trainer::new(&SdeSpec::wide(), &tiny_train(5), HOP).unwrap();
    let a = t.make_batch(&data, 3).unwrap();
    let b = t.make_batch(&data, 3).unwrap();
    let c = t.make_batch(&data, 4).unwrap();
    assert_eq!(a[0].x_t, b[0].x_t);
    assert_ne!(a[0].x_t, c[0].x_t);
    for e in &a {
        assert_eq!(e.x0.len(), 2 * HOP);
        assert_eq!(e.mel.n_frames, 2);
    }
}

#[test]
fn single_batch_overfits() {
    let data = [clip(2, 4)];
    let spec = SdeSpec::wide();
    let mut net = tiny_net(1);
    let mut cfg = tiny_train(2000);
    cfg.adam.learning_rate = 3e-3;
    let trainer = Trainer::new(&spec, &cfg, HOP).unwrap();
    let batch = trainer.make_batch(&data, 0).unwrap();
    let mut adam = itowave_nn::Adam::new(cfg.adam.into()).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..2000 {
        let loss = trainer.batch_loss(&net, &batch, true).unwrap();
        last = loss.value().data()[0];
        first.get_or_insert(last);
        let g = itowave_nn::backward(&loss).unwrap();
        net.params_mut().zero_grad();
        net.params_mut().accumulate(&g).unwrap();
        adam.step(net.params_mut()).unwrap();
    }
    let first = first.unwrap();
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn toy_dsm_esm_decreases() {
    let mixture = GaussianMixture1d::symmetric_pair(1.0, 0.3);
    let (_, history) = train_toy_dsm(&mixture, &ToyDsmConfig::default()).unwrap();
    assert_eq!(history.first().unwrap().0, 0);
    assert_eq!(history.last().unwrap().0, 3000);
    let first = history[0].1;
    let last = history.last().unwrap().1;
    assert!(last < 0.05, "{history:?}");
    assert!(last < 0.1 * first, "{history:?}");
}

#[test]
fn invalid_training_configs() {
    for c in [
        TrainingConfig {
            batch_size: 0,
            ..tiny_train(5)
        },
        TrainingConfig {
            segment_length: 20,
            ..tiny_train(5)
        },
        TrainingConfig {
            checkpoint_every: 0,
            ..tiny_train(5)
        },
    ] {
        assert!(matches!(c.validate(HOP), Err(Error::Config(_))));
    }
}
