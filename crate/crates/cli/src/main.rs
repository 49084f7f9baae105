use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "transnas", version, about = "Transformer anomaly detection with multi-objective architecture search")]
struct Cli {
    /// Run configuration (TOML); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Concurrent search trials; all cores by default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or synthesize a labeled dataset, normalize it and write a bundle.
    Prepare,
    /// Train one genome on a prepared bundle.
    Train {
        genome: PathBuf,
        /// Prepared bundle directory; overrides `dataset.bundle`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a split with a trained checkpoint and threshold the scores.
    Detect {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Also write per-dimension scores.
        #[arg(long)]
        per_dim: bool,
    },
    /// Precision, recall and F1 of a score file against labels.
    Evaluate {
        scores: PathBuf,
        /// One label per line; the score file's label column when omitted.
        labels: Option<PathBuf>,
    },
    /// Run the evolutionary architecture search on a prepared bundle.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rank a search ledger and export its front and selected genomes.
    Pareto { ledger: PathBuf },
    /// EACS of every row of a ledger (JSONL) or a CSV table with columns
    /// name, f1, training_time_seconds, parameter_count.
    Eacs { input: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => transnas_core::config::RunConfig::load(p)?,
        None => transnas_core::config::RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(j) = cli.jobs {
        cfg.nas.jobs = j;
    }
    cfg.validate()?;
    let ctx = commands::Context { cfg, force: cli.force };
    match cli.command {
        Command::Prepare => commands::prepare(&ctx),
        Command::Train { genome, data } => commands::train(&ctx, &genome, data.as_deref()),
        Command::Detect {
            checkpoint,
            data,
            split,
            per_dim,
        } => commands::detect(&ctx, &checkpoint, data.as_deref(), split, per_dim),
        Command::Evaluate { scores, labels } => commands::evaluate(&ctx, &scores, labels.as_deref()),
        Command::Search { data } => commands::search(&ctx, data.as_deref()),
        Command::Pareto { ledger } => commands::pareto(&ctx, &ledger),
        Command::Eacs { input } => commands::eacs(&ctx, &input),
    }
}
