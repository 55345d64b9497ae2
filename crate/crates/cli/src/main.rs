mod commands;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multimodal tropical-cyclone forecasting at desk scale.
#[derive(Parser, Debug)]
#[command(name = "hurricast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory; relative input paths resolve against it.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides both the config file and HURICAST_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic tracks, cubes and operational forecasts.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        storms: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// statistical, vision or both
        #[arg(long)]
        signal: Option<String>,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Build the case store from tracks (and cubes when present).
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        tracks: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        cubes: Option<PathBuf>,
    },
    /// Fit one base variant (1-4) and save its bundle.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<u8>,
    },
    /// Dump the embeddings of a trained vision variant.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<u8>,
    },
    /// Forecast the cases of one split with a trained bundle.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<u8>,
        /// train, validation or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Stack variants 1-4 and build the consensus with operational members.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        operational: Option<PathBuf>,
    },
    /// Score forecasts, or recompute the skills listed in a fixture.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        fixtures: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        operational: Option<PathBuf>,
    },
    /// Tucker-decompose one cube file and print core statistics.
    Decompose {
        #[arg(long, value_name = "FILE")]
        cube: PathBuf,
        /// Core ranks, four comma-separated integers.
        #[arg(long, default_value = "3,5,3,3")]
        ranks: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            storms,
            steps,
            signal,
            noise_sd,
        } => commands::synth(&common, storms, steps, signal.as_deref(), noise_sd),
        Command::Ingest {
            common,
            tracks,
            cubes,
        } => commands::ingest(&common, tracks, cubes),
        Command::Train { common, variant } => commands::train(&common, variant),
        Command::Extract { common, variant } => commands::extract(&common, variant),
        Command::Predict {
            common,
            variant,
            split,
        } => commands::predict(&common, variant, &split),
        Command::Ensemble {
            common,
            operational,
        } => commands::ensemble(&common, operational),
        Command::Evaluate {
            common,
            fixtures,
            operational,
        } => commands::evaluate(&common, fixtures, operational),
        Command::Decompose { cube, ranks } => commands::decompose(&cube, &ranks),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}
