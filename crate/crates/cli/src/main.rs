mod commands;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for invalid input: bad flags, configs, datasets or checkpoints.
pub const EXIT_INVALID: u8 = 1;
/// Exit status for failures after the inputs were accepted.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "aef", version, about = "Train and evaluate autoencoders within flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `optimizer.lr=1e-4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root for run directories.
    #[arg(long, env = "AEF_OUTPUT_ROOT", default_value = "runs")]
    pub output_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `<output-root>/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations, keeping a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Estimate test log-likelihood and bits per dimension.
    Eval {
        /// Run directory or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Importance samples per round; defaults to the config value.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Evaluate only the first rows of the test set.
        #[arg(long)]
        limit: Option<usize>,
        /// Validation rows used to tune the proposal scale.
        #[arg(long, default_value_t = 256)]
        tune_rows: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples and write them as an image grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Scale of the base sample; defaults to the config value.
        #[arg(long)]
        temperature: Option<f64>,
        /// Output PNG; a CSV with the raw values is written next to it.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct test inputs.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct noisy test inputs and report the error to the clean ones.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Standard deviation of the added Gaussian noise.
        #[arg(long)]
        noise: f64,
        /// Cells per band in the triptych image.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Evaluate only the first rows of the test set.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and compare the flow ablations of the AEF and VAE families.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding one run per setting; defaults to `<output-root>/<name>-ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only the family of the configured variant (4 runs instead of 8).
        #[arg(long)]
        single_family: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            out,
            resume,
            stop_after,
        } => commands::train(&config, out, resume, stop_after),
        Command::Eval {
            checkpoint,
            out,
            samples,
            rounds,
            limit,
            tune_rows,
            seed,
        } => commands::eval(commands::EvalArgs {
            checkpoint,
            out,
            samples,
            rounds,
            limit,
            tune_rows,
            seed,
        }),
        Command::Sample {
            checkpoint,
            count,
            temperature,
            output,
            seed,
        } => commands::sample(&checkpoint, count, temperature, output, seed),
        Command::Reconstruct {
            checkpoint,
            count,
            out,
        } => commands::reconstruct(&checkpoint, count, out),
        Command::Denoise {
            checkpoint,
            noise,
            count,
            limit,
            out,
            seed,
        } => commands::denoise(&checkpoint, noise, count, limit, out, seed),
        Command::Ablate {
            config,
            out,
            single_family,
        } => commands::ablate(&config, out, single_family),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
