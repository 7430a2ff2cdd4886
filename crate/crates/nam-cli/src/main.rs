//! `nam` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or training
//! failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nam::model::ViewMode;
use nam::NamError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<NamError> for CliError {
    fn from(e: NamError) -> Self {
        let msg = e.to_string();
        match e {
            NamError::Domain(_) => CliError::Usage(msg),
            NamError::Parse { .. }
            | NamError::Io { .. }
            | NamError::Lookup(_)
            | NamError::UnknownLabel(_)
            | NamError::Checkpoint(_) => CliError::Data(msg),
            NamError::Shape { .. } | NamError::NoActiveView | NamError::Sampling(_) | NamError::Training(_) => {
                CliError::Numeric(msg)
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nam", version, about = "Multiview item-to-item recommender with attention over views")]
struct Cli {
    /// Run manifest (TOML). Flags override its values.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Treat malformed input lines as errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any manifest value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse interactions and metadata, assign the test fold, write the dataset.
    Ingest,
    /// Simulate a cold catalog slice and remove it from training.
    SplitCold {
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Pretrain item2vec embeddings for the CF view.
    TrainCf,
    /// Train the per-view similarity towers.
    TrainPhase1,
    /// Train attention and fine-tune from the phase-one checkpoint.
    TrainPhase2,
    /// Score the test users' pairs and report HR@K / MRR@K.
    Evaluate {
        #[arg(long, default_value = "nam")]
        mode: ViewMode,
        /// Comma-separated cutoffs.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank the catalog for one query item, with per-view attention.
    Recommend {
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "nam")]
        mode: ViewMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient checks and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Scale analytic gradients before checking; the check should fail.
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
    },
    /// Run the whole pipeline once per user fold and aggregate.
    CrossValidate {
        #[arg(long, default_value = "nam")]
        mode: ViewMode,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        fraction: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let mut m = manifest::Manifest::load(cli.manifest.as_deref(), &cli.set)?;
    m.set_seed(cli.seed.unwrap_or(m.seed));
    if let Some(out) = cli.out {
        m.output.dir = out;
    }
    let ctx = commands::Ctx::new(m, cli.strict);
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::SplitCold { fraction } => commands::split_cold(&ctx, fraction),
        Command::TrainCf => commands::train_cf(&ctx),
        Command::TrainPhase1 => commands::train_phase1(&ctx),
        Command::TrainPhase2 => commands::train_phase2(&ctx),
        Command::Evaluate { mode, k, checkpoint } => commands::evaluate(&ctx, mode, &k, checkpoint),
        Command::Recommend { item, k, mode, checkpoint } => commands::recommend(&ctx, &item, k, mode, checkpoint),
        Command::Selftest { cases, corrupt_backward } => commands::selftest(&ctx, cases, corrupt_backward),
        Command::CrossValidate { mode, k, fraction } => commands::cross_validate(&ctx, mode, &k, fraction),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
