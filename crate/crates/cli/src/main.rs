mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use itowave::{Preset, Result, RunConfig};

#[derive(Parser)]
#[command(name = "itowave", version, about = "VE-SDE diffusion vocoder")]
struct Cli {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, sampling, split and validation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base configuration: paper, wide or desk.
    #[arg(long, global = true, default_value = "wide")]
    preset: Preset,
    /// Print the effective configuration with comments and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract mel caches and write the split manifest.
    Features {
        /// Directory of WAV files; defaults to paths.dataset_dir.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the score network on the train split.
    Train,
    /// Generate waveforms from mels.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `.mel` caches or `.wav` files; defaults to the test split.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Also write the state after these iteration counts.
        #[arg(long, value_delimiter = ',')]
        snapshots: Vec<usize>,
    },
    /// Write per-step trajectory statistics and snapshot WAVs for one mel.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A `.mel` cache or `.wav` file; defaults to the first test item.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        snapshots: Vec<usize>,
    },
    /// Run the analytic validation battery.
    Validate,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::preset(cli.preset);
    let mut config = match &cli.config {
        Some(path) => RunConfig::load_over(&base, path)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.sample.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    if cli.print_config {
        print!("{}", config.to_annotated_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        return Err(itowave::Error::Config("no command given (see --help)".into()));
    };
    match command {
        Command::Features { input } => commands::features(&config, input.as_deref()),
        Command::Train => commands::train(&config),
        Command::Sample {
            checkpoint,
            input,
            snapshots,
        } => commands::sample(&config, checkpoint.as_deref(), &input, &snapshots),
        Command::Diagnose {
            checkpoint,
            input,
            snapshots,
        } => commands::diagnose(&config, checkpoint.as_deref(), input.as_deref(), &snapshots),
        Command::Validate => return commands::validate(cli.seed.unwrap_or(0)),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    itowave_nn::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
