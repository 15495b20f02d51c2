//! `maskdec` command-line driver: data generation, training, decoding,
//! benchmarking, rank probing and the exactness check.

mod bench;
mod commands;
mod suite;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskdec::decoding::Strategy;
use maskdec::training::{Task, TrainError};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_CHECKSUM: u8 = 5;

#[derive(Parser)]
#[command(
    name = "maskdec",
    version,
    about = "Mask-token speculative decoding on small transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenData {
        #[arg(long, default_value = "pattern")]
        task: Task,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        seq_len: usize,
        /// Source text for the file task.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an untrained checkpoint for a config.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain (unless --base is given) and fine-tune into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start fine-tuning from this checkpoint instead of pretraining.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speculatively decode one prompt.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "quadratic")]
        strategy: Strategy,
        /// Masks per step; defaults to the trained count.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Draft from per-mask base argmax instead of the sampler.
        #[arg(long)]
        no_sampler: bool,
    },
    /// Acceptance-rate table over a prompt suite for k_eval = 1..k.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// `heldout:N`, `random:N` or a file with one prompt per line.
        #[arg(long, default_value = "heldout:50")]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "linear,quadratic")]
        strategies: Vec<Strategy>,
        /// Inclusive range such as `1-4`; defaults to 1 through the trained count.
        #[arg(long)]
        k_range: Option<String>,
        /// Also report rows with the sampler switched off.
        #[arg(long)]
        ablate: bool,
        #[arg(long, default_value_t = 100)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank of the true future tokens at each mask position.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// The true continuation of the prompt, starting with the next token.
        #[arg(long)]
        future: String,
    },
    /// Check speculative output against greedy decoding on a suite.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "random:100")]
        suite: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Marker error for a failed exactness check.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} speculative decodes differ from greedy decoding", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Io(_) => EXIT_IO,
                TrainError::Checksum { .. } | TrainError::Version { .. } | TrainError::Checkpoint(_) => EXIT_CHECKSUM,
                TrainError::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            task,
            size,
            seed,
            seq_len,
            input,
            out,
        } => commands::gen_data(task, size, seed, seq_len, input, &out),
        Command::Init { config, out } => commands::init(config.as_deref(), &out),
        Command::Train { config, base, out } => commands::train(config.as_deref(), base.as_deref(), &out),
        Command::Decode {
            ckpt,
            prompt,
            strategy,
            k,
            max_new,
            no_sampler,
        } => commands::decode(&ckpt, &prompt, strategy, k, max_new, no_sampler),
        Command::Bench {
            ckpt,
            suite,
            strategies,
            k_range,
            ablate,
            max_new,
            seed,
            out,
        } => bench::run(
            &ckpt,
            &suite,
            &strategies,
            k_range.as_deref(),
            ablate,
            max_new,
            seed,
            out.as_deref(),
        ),
        Command::Probe { ckpt, prompt, future } => commands::probe(&ckpt, &prompt, &future),
        Command::Verify {
            ckpt,
            suite,
            k,
            max_new,
            seed,
        } => commands::verify(&ckpt, &suite, k, max_new, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
