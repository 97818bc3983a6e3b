//! Command-line front end: phantom generation, training, volume synthesis,
//! and evaluation.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "voxdiff",
    about = "Conditional volumetric diffusion synthesis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic paired training volumes.
    Phantom {
        /// Output directory for the volume pairs and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs to generate.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Volume extents as HxWxL.
        #[arg(long, default_value = "32x32x8")]
        extents: String,
        /// Base random seed; pair i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser on paired volumes.
    Train {
        /// Directory produced by `phantom` (or matching its manifest layout).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and logs.
        #[arg(long)]
        out: PathBuf,
        /// Configuration file of key=value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Individual key=value overrides (repeatable, applied after --config).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Random seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps (overrides epoch count).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Synthesize a volume from a conditioning volume and a checkpoint.
    Generate {
        /// Trained checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Conditioning (source-modality) volume.
        #[arg(long)]
        input: PathBuf,
        /// Output volume path.
        #[arg(long)]
        out: PathBuf,
        /// Individual key=value overrides on the checkpoint configuration.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Random seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare synthesized volumes against references.
    Evaluate {
        /// Synthesized volume(s).
        #[arg(long, required = true, num_args = 1..)]
        generated: Vec<PathBuf>,
        /// Reference volume(s), same count and order.
        #[arg(long, required = true, num_args = 1..)]
        reference: Vec<PathBuf>,
        /// Optional second set of synthesized volumes; per-case MAE values of
        /// the two sets are compared with a paired t-test.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        /// Optional CSV output path for per-case metrics.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom {
            out,
            count,
            extents,
            seed,
        } => commands::phantom(&out, count, &extents, seed),
        Command::Train {
            data,
            out,
            config,
            sets,
            seed,
            max_steps,
        } => commands::train(&data, &out, config.as_deref(), &sets, seed, max_steps),
        Command::Generate {
            checkpoint,
            input,
            out,
            sets,
            seed,
        } => commands::generate(&checkpoint, &input, &out, &sets, seed),
        Command::Evaluate {
            generated,
            reference,
            compare,
            csv,
        } => commands::evaluate(&generated, &reference, &compare, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
