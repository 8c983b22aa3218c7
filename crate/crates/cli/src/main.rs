mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, RunConfig};
use error::CliError;

/// Train, evaluate, and inspect activity graph transformers.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
/// arguments, 3 missing input file, 4 non-finite loss, 5 gradient check above
/// tolerance.
#[derive(Debug, Parser)]
#[command(name = "agt", version)]
struct Cli {
    #[command(flatten)]
    source: ConfigSource,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration (default: overfit).
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Override a config field, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(p)) => p.config(),
            (None, None) => Preset::Overfit.config(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and print its statistics as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing a checkpoint and loss curve under `paths.out_dir`.
    Train {
        /// Training corpus (default: `paths.train_data`, else synthesized).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// mAP at the configured tIoU thresholds.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// Score a detections CSV instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
        /// Ground-truth corpus (default: `paths.test_data`, then training data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report CSV (default: `<out_dir>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the detections of a trained model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detections CSV (default: `<out_dir>/detections.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients of each module with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smooth random draws per module.
        #[arg(long, default_value_t = 2)]
        draws: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Results CSV (printed to stdout as well).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segmentation error against instance duration.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the resolved configuration as TOML.
    Dump,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.source.resolve()?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Train { data, resume } => {
            commands::train(&cfg, data.as_deref(), resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            detections,
            data,
            out,
        } => commands::eval(
            &cfg,
            checkpoint.as_deref(),
            detections.as_deref(),
            data.as_deref(),
            out.as_deref(),
        ),
        Command::Predict {
            checkpoint,
            data,
            out,
        } => commands::predict(&cfg, &checkpoint, data.as_deref(), out.as_deref()),
        Command::Gradcheck {
            seed,
            draws,
            tolerance,
            out,
        } => commands::gradcheck(&cfg, seed, draws, tolerance, out.as_deref()),
        Command::Analyze { checkpoint, data } => {
            commands::analyze(&cfg, &checkpoint, data.as_deref())
        }
        Command::Config {
            action: ConfigAction::Dump,
        } => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
