//! `motkit` command line: synthetic sequences in, tracks and metrics out.
//!
//! Exit codes: 0 on success, 1 when a verification subcommand finds a
//! violation, 2 on usage errors (bad flags, missing or malformed files).

mod checks;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "motkit", version, about = "Desk-scale multiple object tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a detection file or a synthetic scenario and write MOT results
    Track {
        /// MOT detection CSV, or a key=value scenario config (detected by content)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output MOT file
        #[arg(long)]
        out: PathBuf,
        /// Base run configuration; the input config, if any, layers on top
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dump the first frame's heatmap as a text map for `viz`
        #[arg(long)]
        dump_heatmap: Option<PathBuf>,
    },
    /// Evaluate tracking output against ground truth
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic scenario: writes gt.txt and det.txt
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference verification of every gradient path
    Gradcheck {
        /// Random restarts per module
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Deformable vs dense attention timings and scaling ratios
    Bench {
        /// Comma-separated square map extents
        #[arg(long, default_value = "32,45,64")]
        sizes: String,
    },
    /// Render a saved map dump as a grayscale PPM image
    Viz {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration (defaults plus overrides)
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Track {
            input,
            out,
            config,
            dump_heatmap,
        } => commands::track(&input, &out, config.as_deref(), dump_heatmap.as_deref()),
        Command::Eval { gt, pred, config } => commands::eval(&gt, &pred, config.as_deref()),
        Command::Synth { config, out_dir } => commands::synth(config.as_deref(), &out_dir),
        Command::Gradcheck { seeds } => return checks::gradcheck(seeds),
        Command::Bench { sizes } => checks::bench(&sizes),
        Command::Viz { tensor, out } => commands::viz(&tensor, &out),
        Command::Config { config } => commands::echo_config(config.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
