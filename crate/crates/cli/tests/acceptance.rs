//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use itowave::features::{aligned_pair, read_wav, write_wav, Waveform};
use itowave::sampler::{generate, SamplerConfig};
use itowave::score_net::ScoreNet;
use itowave::sde::{score_of_transition, SdeSpec};
use itowave::stats::{ks_critical, ks_statistic, mean, normal_cdf, variance};
use itowave::training::toy::{train_toy_dsm, GaussianMixture1d, ToyDsmConfig};
use itowave::training::{train, TrainOutput, TrainingClip};
use itowave::validate::{
    forward_variance, gaussian_recovery, langevin_chains, moment_ode_error, recovery_sampler, score_fd_error,
    score_net_gradcheck, RECOVERY_MEAN, RECOVERY_STD,
};
use itowave::{Preset, RunConfig};
use itowave_nn::gradcheck::layer_suite;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn score_oracle() -> Outcome {
    let spec = SdeSpec::paper();
    let e =
        score_fd_error(&spec, &|s, xt, x0, t| score_of_transition(s, xt, x0, t), 1000, 0).map_err(|e| e.to_string())?;
    verdict(e < 1e-5, format!("max relative error {e:.3e} (< 1e-5)"))
}

fn moment_ode() -> Outcome {
    let e = moment_ode_error(&SdeSpec::paper(), 100, 100);
    verdict(e < 1e-8, format!("max relative error {e:.3e} (< 1e-8)"))
}

fn forward_simulation() -> Outcome {
    let spec = SdeSpec::paper();
    let times = [0.25, 0.5, 1.0];
    let v = forward_variance(&spec, &times, 10_000, 0).map_err(|e| e.to_string())?;
    let errs: Vec<f64> = times
        .iter()
        .zip(&v)
        .map(|(t, v)| (v / spec.variance(*t) - 1.0).abs())
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(
        worst < 0.05,
        format!(
            "relative errors at t=0.25,0.5,1: {:.4} {:.4} {:.4} (< 0.05)",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn langevin() -> Outcome {
    let n = 100_000;
    let x = langevin_chains(n, 2000, 0.01, 0).map_err(|e| e.to_string())?;
    let d = ks_statistic(&x, |v| normal_cdf(v, 0.0, 1.0));
    let crit = ks_critical(n, 0.01);
    verdict(d < crit, format!("KS statistic {d:.5} (< {crit:.5})"))
}

fn gaussian_recovery_check() -> Outcome {
    let x = gaussian_recovery(
        &SdeSpec::wide(),
        &recovery_sampler(0),
        RECOVERY_MEAN,
        RECOVERY_STD,
        10_000,
    )
    .map_err(|e| e.to_string())?;
    let dm = (mean(&x) - RECOVERY_MEAN).abs();
    let dv = (variance(&x) / (RECOVERY_STD * RECOVERY_STD) - 1.0).abs();
    verdict(
        dm < 0.02 && dv < 0.05,
        format!("mean error {dm:.4} (< 0.02), variance relative error {dv:.4} (< 0.05)"),
    )
}

fn dsm_esm() -> Outcome {
    let mixture = GaussianMixture1d::symmetric_pair(1.0, 0.3);
    let (_, history) = train_toy_dsm(&mixture, &ToyDsmConfig::default()).map_err(|e| e.to_string())?;
    let last = history.last().ok_or("empty history")?.1;
    verdict(last < 0.05, format!("ESM error {last:.4} (< 0.05)"))
}

fn gradients() -> Outcome {
    let layers = layer_suite(0).map_err(|e| e.to_string())?;
    let (name, worst) = layers
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let net = score_net_gradcheck(0, 8).map_err(|e| e.to_string())?;
    verdict(
        worst < 1e-3 && net < 1e-3,
        format!(
            "{} layers worst {worst:.2e} ({name}), 2-block score net {net:.2e} (< 1e-3)",
            layers.len()
        ),
    )
}

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn overfit() -> Outcome {
    let config = RunConfig::preset(Preset::Desk);
    let fc = &config.feature;
    let wave = read_wav(&data_file("clip.wav"), fc.sample_rate).map_err(|e| e.to_string())?;
    let (x, mel) = aligned_pair(&wave, fc).map_err(|e| e.to_string())?;
    let clip = TrainingClip::new(x, mel.clone(), fc.hop_length).map_err(|e| e.to_string())?;
    let untrained = ScoreNet::new(&config.model, &config.sde, fc, config.train.seed).map_err(|e| e.to_string())?;
    let mut net = untrained.clone();
    let clock = Instant::now();
    let report =
        train(&[clip], &mut net, &config.sde, &config.train, &TrainOutput::default()).map_err(|e| e.to_string())?;
    let trained_in = clock.elapsed().as_secs();

    let steps = [200, 400, 600, 800, 1000];
    let sc = SamplerConfig {
        snapshot_steps: steps.to_vec(),
        ..config.sample.clone()
    };
    let distance = |net: &ScoreNet, name: &str| -> Result<(f64, Vec<f64>), String> {
        let (out, traj) = generate(&mel, net, fc, &sc).map_err(|e| e.to_string())?;
        let (_, got) = aligned_pair(&out, fc).map_err(|e| e.to_string())?;
        let hf = steps
            .iter()
            .map(|&s| traj.stats().iter().find(|r| r.step == s).unwrap().hf_rms)
            .collect();
        if let Ok(dir) = std::env::var("ITOWAVE_ACCEPTANCE_OUT") {
            let _ = write_wav(&Path::new(&dir).join(format!("{name}.wav")), &out.clamped());
        }
        Ok((got.l1_distance(&mel).map_err(|e| e.to_string())?, hf))
    };
    let (d_trained, hf) = distance(&net, "trained")?;
    let (d_untrained, _) = distance(&untrained, "untrained")?;
    let ratio = d_trained / d_untrained;
    let monotone = hf.windows(2).all(|w| w[1] < w[0]);
    let hf_text: Vec<String> = hf.iter().map(|v| format!("{v:.3e}")).collect();
    verdict(
        ratio < 0.5 && monotone,
        format!(
            "{} steps in {trained_in} s; mel L1 {d_trained:.4} vs untrained {d_untrained:.4}, ratio {ratio:.3} (< 0.5); hf_rms at 200..1000: {}",
            report.final_step,
            hf_text.join(" ")
        ),
    )
}

/// Short synthetic clips: harmonic tones with a per-file pitch.
fn write_dataset(dir: &Path, files: usize, samples: usize) {
    fs::create_dir_all(dir).unwrap();
    for k in 0..files {
        let f0 = 110.0 + 30.0 * k as f64;
        let x: Vec<f64> = (0..samples)
            .map(|i| {
                let t = i as f64 / 22050.0;
                (1..4)
                    .map(|h| 0.3 / h as f64 * (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin())
                    .sum()
            })
            .collect();
        write_wav(&dir.join(format!("clip{k:02}.wav")), &Waveform::new(x, 22050).unwrap()).unwrap();
    }
}

fn tiny_config(root: &Path) -> PathBuf {
    let text = format!(
        r#"[model]
residual_layers = 2
residual_channels = 4
skip_channels = 4
time_embed_dim = 8

[train]
batch_size = 2
segment_length = 512
max_steps = 100
checkpoint_every = 50

[sample]
n_steps = 20
snapshot_steps = [10]

[paths]
dataset_dir = "{0}/wavs"
cache_dir = "{0}/cache"
checkpoint_dir = "{0}/ckpt"
output_dir = "{0}/out"
"#,
        root.display()
    );
    let path = root.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn itowave(config: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_itowave"))
        .arg("--config")
        .arg(config)
        .args(["--seed", "5"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "itowave {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

/// Everything a run leaves on disk, with the wall-clock column of the
/// metrics dropped.
fn run_outputs(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for sub in ["cache", "ckpt", "out"] {
        let mut names: Vec<PathBuf> = fs::read_dir(root.join(sub))
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            let mut bytes = fs::read(&p).map_err(|e| e.to_string())?;
            if p.file_name().is_some_and(|n| n == "metrics.tsv") {
                let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
                let kept: Vec<String> = text
                    .lines()
                    .map(|l| l.rsplit_once('\t').map_or(l, |(a, _)| a).to_string())
                    .collect();
                bytes = kept.join("\n").into_bytes();
            }
            files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), bytes));
        }
    }
    Ok(files)
}

/// Two runs in the same directory, with every output removed in between.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    write_dataset(&root.join("wavs"), 4, 5120);
    let config = tiny_config(root);
    let mut runs = Vec::new();
    for _ in 0..2 {
        for sub in ["cache", "ckpt", "out"] {
            let _ = fs::remove_dir_all(root.join(sub));
        }
        let report = itowave(&config, &["validate"])?;
        itowave(&config, &["features"])?;
        itowave(&config, &["train"])?;
        itowave(&config, &["sample", "--snapshots", "10"])?;
        runs.push((report, run_outputs(root)?));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let files_equal = a.1 == b.1;
    let differing: Vec<&str> =
        a.1.iter()
            .zip(&b.1)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
    let ckpts = a.1.iter().filter(|f| f.0.ends_with(".ckpt")).count();
    let wavs = a.1.iter().filter(|f| f.0.starts_with("out/")).count();
    verdict(
        a.0 == b.0 && files_equal && ckpts == 2 && wavs > 0,
        format!(
            "validate report identical: {}; {} output files ({ckpts} checkpoints, {wavs} wavs) identical: {files_equal}{}",
            a.0 == b.0,
            a.1.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    )
}

fn main() {
    itowave_nn::retain_freed_memory();
    let criteria: [Criterion; 9] = [
        ("score formula vs finite differences", score_oracle),
        ("moment ODE consistency", moment_ode),
        ("forward simulation variance", forward_simulation),
        ("Langevin stationarity", langevin),
        ("end-to-end Gaussian recovery", gaussian_recovery_check),
        ("DSM/ESM equivalence", dsm_esm),
        ("gradient checks", gradients),
        ("single-clip overfit", overfit),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let clock = Instant::now();
        let outcome = run();
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
