use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use itowave::features::{
    aligned_pair, mel_spectrogram, read_mel_cache, read_wav, write_mel_cache, write_wav, MelSpectrogram, Waveform,
};
use itowave::sampler::{generate, SamplerConfig, Trajectory};
use itowave::score_net::ScoreNet;
use itowave::training::{latest_checkpoint, train as run_training, TrainOutput, TrainingClip};
use itowave::validate::run_battery;
use itowave::{Error, Result, RunConfig};
use itowave_nn::Checkpoint;
use rayon::prelude::*;

use crate::manifest::{self, Entry, Split, MANIFEST_NAME};

/// Feature fingerprint the checkpoints in a directory were trained with.
const FINGERPRINT_NAME: &str = "features.fp";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Mel of the waveform cropped to whole hops, before alignment.
fn cache_one(path: &Path, config: &RunConfig) -> Result<(Waveform, MelSpectrogram)> {
    let wave = read_wav(path, config.feature.sample_rate)?;
    let hop = config.feature.hop_length;
    let frames = wave.len() / hop;
    if frames == 0 {
        return Err(Error::Data(format!("{}: shorter than one hop", path.display())));
    }
    let cropped = Waveform::new(wave.samples[..frames * hop].to_vec(), wave.sample_rate)?;
    let mel = mel_spectrogram(&cropped, &config.feature)?;
    Ok((cropped, mel))
}

pub fn features(config: &RunConfig, input: Option<&Path>) -> Result<()> {
    let dir = input.unwrap_or(&config.paths.dataset_dir);
    let files = wav_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no input files in {}", dir.display())));
    }
    let cache = &config.paths.cache_dir;
    create_dir(cache)?;
    let results: Vec<Option<(PathBuf, usize, usize)>> = files
        .par_iter()
        .map(|path| {
            let done = cache_one(path, config).and_then(|(wave, mel)| {
                write_mel_cache(&cache.join(format!("{}.mel", stem(path))), &mel)?;
                Ok((path.clone(), wave.len(), mel.n_frames))
            });
            match done {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    None
                }
            }
        })
        .collect();
    let ok: Vec<_> = results.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Data(format!(
            "none of the {} input files could be read",
            files.len()
        )));
    }
    let splits = manifest::assign_splits(ok.len(), config.train.seed);
    let entries: Vec<Entry> = ok
        .into_iter()
        .zip(splits)
        .map(|((path, samples, frames), split)| Entry {
            file: path.to_string_lossy().into_owned(),
            split,
            samples,
            frames,
        })
        .collect();
    manifest::write(&cache.join(MANIFEST_NAME), &entries)?;
    log::info!(
        "cached {} of {} files in {}",
        entries.len(),
        files.len(),
        cache.display()
    );
    Ok(())
}

fn split_entries(config: &RunConfig, split: Split) -> Result<Vec<Entry>> {
    let path = config.paths.cache_dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `features` first",
            path.display()
        )));
    }
    Ok(manifest::read(&path)?
        .into_iter()
        .filter(|e| e.split == split)
        .collect())
}

fn cached_mel(config: &RunConfig, entry: &Entry) -> Result<MelSpectrogram> {
    let mel = read_mel_cache(&config.paths.cache_dir.join(entry.cache_name()))?;
    mel.check_fingerprint(&config.feature)?;
    Ok(mel)
}

fn check_checkpoint_fingerprint(dir: &Path, config: &RunConfig) -> Result<()> {
    let path = dir.join(FINGERPRINT_NAME);
    let expected = config.feature.fingerprint();
    if !path.exists() {
        return fs::write(&path, format!("{expected:016x}\n")).map_err(|e| Error::io(&path, e));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let found = u64::from_str_radix(text.trim(), 16)
        .map_err(|_| Error::Data(format!("{}: not a fingerprint", path.display())))?;
    if found != expected {
        return Err(Error::Fingerprint { expected, found });
    }
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    let entries = split_entries(config, Split::Train)?;
    if entries.is_empty() {
        return Err(Error::Data("manifest has no training files".into()));
    }
    let hop = config.feature.hop_length;
    let dataset = entries
        .iter()
        .map(|e| {
            let (wave, _) = cache_one(Path::new(&e.file), config)?;
            let mel = cached_mel(config, e)?.aligned()?;
            TrainingClip::new(wave.samples, mel, hop)
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = &config.paths.checkpoint_dir;
    create_dir(dir)?;
    check_checkpoint_fingerprint(dir, config)?;
    let mut net = ScoreNet::new(&config.model, &config.sde, &config.feature, config.train.seed)?;
    let out = TrainOutput {
        checkpoint_dir: Some(dir.clone()),
        metrics_path: Some(dir.join("metrics.tsv")),
    };
    let report = run_training(&dataset, &mut net, &config.sde, &config.train, &out)?;
    log::info!("trained steps {}..{}", report.start_step, report.final_step);
    Ok(())
}

fn load_net(config: &RunConfig, checkpoint: Option<&Path>) -> Result<ScoreNet> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            latest_checkpoint(&config.paths.checkpoint_dir)?
                .ok_or_else(|| Error::Data(format!("no checkpoint in {}", config.paths.checkpoint_dir.display())))?
                .1
        }
    };
    if let Some(dir) = path.parent() {
        if dir.join(FINGERPRINT_NAME).exists() {
            check_checkpoint_fingerprint(dir, config)?;
        }
    }
    let mut net = ScoreNet::new(&config.model, &config.sde, &config.feature, 0)?;
    net.load_checkpoint(&Checkpoint::load(&path)?)?;
    log::info!("loaded {}", path.display());
    Ok(net)
}

/// Aligned conditioning mel from a `.mel` cache or a `.wav` file.
fn input_mel(config: &RunConfig, path: &Path) -> Result<MelSpectrogram> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let wave = read_wav(path, config.feature.sample_rate)?;
        return Ok(aligned_pair(&wave, &config.feature)?.1);
    }
    let mel = read_mel_cache(path)?;
    mel.check_fingerprint(&config.feature)?;
    mel.aligned()
}

fn default_inputs(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let test = split_entries(config, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("manifest has no test files".into()));
    }
    Ok(test
        .iter()
        .map(|e| config.paths.cache_dir.join(e.cache_name()))
        .collect())
}

fn sampler_with(config: &RunConfig, snapshots: &[usize]) -> Result<SamplerConfig> {
    let mut sc = config.sample.clone();
    if !snapshots.is_empty() {
        sc.snapshot_steps = snapshots.to_vec();
    }
    sc.validate()?;
    Ok(sc)
}

fn write_snapshots(traj: &Trajectory, dir: &Path, prefix: &str, rate: u32) -> Result<()> {
    for s in &traj.snapshots {
        let wave = Waveform::new(s.state.x.clone(), rate)?;
        write_wav(&dir.join(format!("{prefix}step_{}.wav", s.step)), &wave)?;
    }
    Ok(())
}

pub fn sample(config: &RunConfig, checkpoint: Option<&Path>, inputs: &[PathBuf], snapshots: &[usize]) -> Result<()> {
    let sc = sampler_with(config, snapshots)?;
    let net = load_net(config, checkpoint)?;
    let inputs = if inputs.is_empty() {
        default_inputs(config)?
    } else {
        inputs.to_vec()
    };
    let out = &config.paths.output_dir;
    create_dir(out)?;
    for path in &inputs {
        let mel = input_mel(config, path)?;
        let (wave, traj) = generate(&mel, &net, &config.feature, &sc)?;
        let name = stem(path);
        write_wav(&out.join(format!("{name}.wav")), &wave)?;
        if !snapshots.is_empty() {
            write_snapshots(&traj, out, &format!("{name}_"), config.feature.sample_rate)?;
        }
        log::info!("wrote {name}.wav ({} samples)", wave.len());
    }
    Ok(())
}

pub fn diagnose(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    snapshots: &[usize],
) -> Result<()> {
    let mut sc = sampler_with(config, snapshots)?;
    if sc.snapshot_steps.is_empty() {
        let n = sc.n_steps;
        sc.snapshot_steps = (0..=10).map(|k| k * n / 10).collect();
        sc.snapshot_steps.dedup();
    }
    let net = load_net(config, checkpoint)?;
    let path = match input {
        Some(p) => p.to_path_buf(),
        None => default_inputs(config)?.remove(0),
    };
    let mel = input_mel(config, &path)?;
    let (_, traj) = generate(&mel, &net, &config.feature, &sc)?;
    let out = &config.paths.output_dir;
    create_dir(out)?;
    traj.write_stats(&out.join("trajectory_stats.tsv"))?;
    write_snapshots(&traj, out, "", config.feature.sample_rate)?;
    print!("{}", traj.stats_tsv());
    Ok(())
}

/// Prints the report; exit code 4 if any check fails.
pub fn validate(seed: u64) -> Result<ExitCode> {
    let report = run_battery(seed)?;
    print!("{}", report.to_tsv());
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}
