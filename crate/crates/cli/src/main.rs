use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod eval;
mod fit;
mod optimize;
mod output;
mod report;
mod setup;

/// Latent Bayesian optimization over token sequences with an invertible flow.
#[derive(Debug, Parser)]
#[command(name = "flowbo", version, about)]
struct Cli {
    /// Print progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment file (TOML). Missing tables take their defaults.
    #[arg(short, long)]
    config: PathBuf,

    /// Where outputs are written.
    #[arg(short, long, env = "FLOWBO_OUTPUT_DIR", default_value = "out")]
    output_dir: PathBuf,

    /// Overrides `run.seed` and `train.seed`.
    #[arg(short, long, env = "FLOWBO_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the flow and embeddings on a corpus and write a checkpoint.
    Fit(Common),
    /// Run the optimization loop against the configured objective.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Run uniform random search with the same budget instead.
        #[arg(long)]
        random_search: bool,
    },
    /// Compute a metric from a checkpoint.
    Eval {
        what: EvalKind,
        #[command(flatten)]
        common: Common,
        /// Directory with `flow.bin` and `embeddings.bin`; defaults to `eval.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge best-so-far curves from several runs into mean and standard error.
    Report {
        /// Run directories, or directories whose subdirectories are runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long, env = "FLOWBO_OUTPUT_DIR", default_value = "out")]
        output_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalKind {
    Discrepancy,
    Distinct,
    Pmi,
}

/// Process outcome, mapped to the documented exit codes.
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| {
            c.downcast_ref::<flowbo::Error>().is_some_and(flowbo::Error::is_config)
        });
        if config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<flowbo::Error> for Failure {
    fn from(e: flowbo::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let log = output::Log::new(cli.verbose);
    match cli.command {
        Command::Fit(c) => fit::run(&c, &log),
        Command::Optimize { common, random_search } => optimize::run(&common, random_search, &log),
        Command::Eval { what, common, checkpoint } => eval::run(what, &common, checkpoint, &log),
        Command::Report { runs, output_dir } => report::run(&runs, &output_dir, &log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
