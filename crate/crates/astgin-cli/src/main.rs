//! Command-line pipeline: ingest, train, evaluate, forecast, perturb,
//! synth, gradcheck.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numerical
//! failure.

mod commands;
mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};
use commands::NumericalError;
use config::{ConfigError, Overrides};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "astgin",
    about = "EV charging availability forecasting over a station graph",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw CSVs and build the processed dataset directory.
    Ingest {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        #[arg(long)]
        poi: PathBuf,
        #[arg(long)]
        connectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid origin `YYYY-MM-DD HH:MM` (default: inferred from sessions).
        #[arg(long)]
        grid_origin: Option<String>,
        /// Grid length in 30-minute steps (default: inferred from sessions).
        #[arg(long)]
        grid_steps: Option<usize>,
    },
    /// Train on a processed dataset and write checkpoint + report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute test metrics for a trained checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write (time, station, truth, prediction) rows.
        #[arg(long)]
        dump_predictions: bool,
        /// Also write attention maps for the first test window.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Predict the next M steps after the end of the series.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clamp predictions into [0,1] on export.
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate under Gaussian input noise over a sigma grid.
    Perturb {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated noise levels.
        #[arg(long, default_value = "0,0.01,0.05,0.1")]
        sigmas: String,
        /// Noise seed (default: the training seed).
        #[arg(long)]
        noise_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic raw dataset in the ingest CSV schemas.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks for every registered differentiable op.
    Gradcheck {
        /// Number of random seeds per op.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("ASTGIN_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| ConfigError(format!("ASTGIN_THREADS must be an integer, got `{raw}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| ConfigError(format!("thread pool init failed: {e}")))?;
    }
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { sessions, weather, poi, connectors, out, grid_origin, grid_steps } => {
            commands::cmd_ingest(
                &sessions,
                &weather,
                &poi,
                &connectors,
                &out,
                grid_origin.as_deref(),
                grid_steps,
            )
        }
        Command::Train { config, overrides, out } => {
            commands::cmd_train(&config, &overrides, out.as_deref())
        }
        Command::Evaluate { config, overrides, checkpoint, out, dump_predictions, dump_attention } => {
            commands::cmd_evaluate(
                &config,
                &overrides,
                &checkpoint,
                out.as_deref(),
                dump_predictions,
                dump_attention,
            )
        }
        Command::Forecast { config, overrides, checkpoint, clamp, out } => {
            commands::cmd_forecast(&config, &overrides, &checkpoint, clamp, out.as_deref())
        }
        Command::Perturb { config, overrides, checkpoint, sigmas, noise_seed, out } => {
            commands::cmd_perturb(&config, &overrides, &checkpoint, &sigmas, noise_seed, out.as_deref())
        }
        Command::Synth { config, overrides, out } => {
            commands::cmd_synth(config.as_deref(), &overrides, &out)
        }
        Command::Gradcheck { seeds, out } => commands::cmd_gradcheck(seeds, out.as_deref()),
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    use astgin::graph::GraphError;
    use astgin::ingest::IngestError;
    use astgin::metrics::MetricsError;
    use astgin::nncore::{CheckpointError, NnError};
    use astgin::synth::SynthError;
    use astgin::trainer::{ModelError, TrainError};

    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<NumericalError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return match e {
                IngestError::Io { .. } => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return match e {
                CheckpointError::Io { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<GraphError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<NnError>() {
            return match e {
                NnError::NonFinite { .. } => 3,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Diverged { .. } => 3,
                TrainError::Nn(NnError::NonFinite { .. }) => 3,
                TrainError::Metrics(_) => 3,
                TrainError::Ingest(IngestError::Io { .. }) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::Gcn { source: NnError::NonFinite { .. } }
                | ModelError::Informer { source: NnError::NonFinite { .. } }
                | ModelError::Nn(NnError::NonFinite { .. }) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<MetricsError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Ingest(IngestError::Io { .. }) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
    }
    1
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
