use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avparse::cli::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, GradCheckDims};
use avparse::model::predictor::DEFAULT_THRESHOLD;

/// Weakly-supervised audio-visual video parsing: synthetic data generation,
/// training, evaluation, and gradient verification.
#[derive(Parser)]
#[command(name = "avparse", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its caption-embedding fixture.
    Gen {
        /// JSON generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        /// JSON train config or a previous run_manifest.json.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, history, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Score a checkpoint on a dataset; prints JSON and writes a CSV row.
    Eval {
        /// Checkpoint file (from `train`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// CSV output path.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Binarization threshold.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        c: usize,
        #[arg(long = "dtext", default_value_t = 8)]
        d_text: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: corrupt one analytic gradient so the check
        /// must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            print_config,
        } => cmd_gen(config.as_deref(), &out, seed, print_config),
        Command::Train {
            config,
            data,
            out,
            seed,
            print_config,
        } => cmd_train(config.as_deref(), &data, &out, seed, print_config),
        Command::Eval {
            checkpoint,
            data,
            out,
            threshold,
        } => cmd_eval(&checkpoint, &data, &out, threshold),
        Command::Gradcheck {
            t,
            d,
            c,
            d_text,
            seed,
            corrupt,
        } => cmd_gradcheck(GradCheckDims { t, d, c, d_text }, seed, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
