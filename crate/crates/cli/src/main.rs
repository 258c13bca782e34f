//! `htlane`: synthetic lane data, Hough-prior training, evaluation and
//! visualization.
//!
//! Exit codes: 0 success, 2 usage or contract violation, 3 malformed input
//! file. Every command ends with one CSV line on stdout; logs go to stderr.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htlane::{Error, HoughPreset, Mode};

#[derive(Parser)]
#[command(name = "htlane", version, about = "Lane detection with a Hough-space line prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by commands that read a run configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub cfg: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied after --cfg.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lane dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Split a dataset into labeled and unlabeled parts and train a model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long = "labeled-frac")]
        labeled_frac: f64,
        /// Checkpoint path; the per-epoch CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; defaults to `<ckpt>.eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image and write mask, overlay and per-lane Hough maps.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out-prefix")]
        out_prefix: PathBuf,
    },
    /// Hough accumulator of a grayscale image.
    Hough {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: HoughPreset,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Format { .. } => 3,
        Error::Config(_) | Error::Data(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn threads() -> Result<usize, String> {
    match std::env::var("HTLANE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("HTLANE_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let n = match threads() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::Gen { out, n, seed, config } => commands::gen(&out, n, seed, &config),
        Command::Train {
            data,
            mode,
            labeled_frac,
            out,
            seed,
            config,
        } => commands::train(&data, mode, labeled_frac, &out, seed, &config),
        Command::Eval { ckpt, data, out } => commands::eval(&ckpt, &data, out.as_deref()),
        Command::Predict { ckpt, image, out_prefix } => commands::predict(&ckpt, &image, &out_prefix),
        Command::Hough { image, preset, out } => commands::hough(&image, preset, &out),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
