//! The `musfill` command line. Every subcommand prints a human-readable
//! report, or JSON with `--json`; randomized ones print their seed.

pub mod commands;
pub mod settings;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use crate::commands::{ControlAssignment, EvalArgs, GeneratorKind, InfillArgs, Printed, Stage};

#[derive(Debug, Parser)]
#[command(name = "musfill", version, about = "Multi-track music infilling with control tokens")]
pub struct Cli {
    /// Print JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the token sequence of a MIDI file.
    Tokenize {
        midi: PathBuf,
        /// Include key, track and bar control tokens.
        #[arg(long)]
        controls: bool,
    },
    /// Show key, tempo and per-track control values with their bins.
    Controls { midi: PathBuf },
    /// Show per-bar tensile strain and cloud diameter.
    Tension { midi: PathBuf },
    /// Build training shards from a folder of MIDI files.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Run one training stage from a config file.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score infills against the originals on a folder of MIDI files.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Encode without control tokens.
        #[arg(long)]
        without_controls: bool,
        #[arg(long, value_enum, default_value_t = GeneratorKind::Model)]
        generator: GeneratorKind,
    },
    /// Regenerate one bar of one track, optionally with new control bins.
    Infill {
        midi: PathBuf,
        #[arg(long)]
        bar: u32,
        #[arg(long)]
        track: usize,
        /// `density=K`, `occupation=K`, `polyphony=K` (for the track) or
        /// `strain=K`, `diameter=K` (for the bar); repeatable.
        #[arg(long = "set", value_name = "NAME=BIN")]
        set: Vec<ControlAssignment>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Write the result as MIDI.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    Build {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bin-edge calibration JSON; built-in edges otherwise.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
}

/// Run a parsed command. `serve` blocks until interrupted.
pub fn run(cli: Cli) -> anyhow::Result<Option<Printed>> {
    let out = match cli.command {
        Command::Tokenize { midi, controls } => commands::tokenize(&midi, controls)?,
        Command::Controls { midi } => commands::controls(&midi)?,
        Command::Tension { midi } => commands::tension(&midi)?,
        Command::Dataset {
            action: DatasetAction::Build {
                dir,
                out,
                seed,
                calibration,
            },
        } => commands::dataset_build(&dir, &out, seed, calibration.as_deref())?,
        Command::Train { stage, config, seed } => commands::train_stage(&config, stage, seed)?,
        Command::Eval {
            checkpoint,
            testset,
            n,
            seed,
            temperature,
            without_controls,
            generator,
        } => commands::eval(&EvalArgs {
            checkpoint: checkpoint.as_deref(),
            testset: &testset,
            n,
            seed,
            temperature,
            with_controls: !without_controls,
            generator,
        })?,
        Command::Infill {
            midi,
            bar,
            track,
            set,
            checkpoint,
            seed,
            temperature,
            out,
        } => commands::infill(&InfillArgs {
            midi: &midi,
            bar,
            track,
            set: &set,
            checkpoint: &checkpoint,
            seed,
            temperature,
            out: out.as_ref(),
        })?,
        Command::Serve { config } => {
            let config = musfill_service::config::ServiceConfig::load(config.as_deref())?;
            let state = musfill_service::AppState::from_config(config)?;
            let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
            runtime.block_on(musfill_service::serve(state))?;
            return Ok(None);
        }
    };
    Ok(Some(out))
}
