//! `engram`: command-line harness over `engram-core`.

mod analyze;
mod config;
mod hash;
mod layer;
mod plan;
mod report;
mod store;
mod util;
mod vocab;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use engram_core::EngramError;
use serde_json::json;

use report::RunInfo;

#[derive(Parser, Debug)]
#[command(name = "engram", version, about = "Hashed N-gram conditional memory toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenizer compression.
    #[command(subcommand)]
    Vocab(vocab::VocabCmd),
    /// N-gram hashing.
    #[command(subcommand)]
    Hash(hash::HashCmd),
    /// Expert / memory-slot budget arithmetic.
    Plan(plan::PlanArgs),
    /// Engram layer forward, backward and toy training.
    #[command(subcommand)]
    Layer(layer::LayerCmd),
    /// Embedding store benchmarks.
    #[command(subcommand)]
    Store(store::StoreCmd),
    /// Representation analysis.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCmd),
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Vocab(c) => format!("vocab {}", c.name()),
            Command::Hash(c) => format!("hash {}", c.name()),
            Command::Plan(_) => "plan".into(),
            Command::Layer(c) => format!("layer {}", c.name()),
            Command::Store(c) => format!("store {}", c.name()),
            Command::Analyze(c) => format!("analyze {}", c.name()),
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<EngramError>() {
        Some(EngramError::Config(_)) => "config",
        Some(EngramError::Validation(_)) => "validation",
        Some(EngramError::Shape(_)) => "shape",
        Some(EngramError::OutOfRange { .. }) => "out_of_range",
        Some(EngramError::PlanMismatch(_)) => "plan_mismatch",
        Some(EngramError::Format { .. }) => "format",
        Some(EngramError::Undefined(_)) => "undefined",
        Some(EngramError::Io(_)) => "io",
        Some(EngramError::Json(_)) => "json",
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None if err.downcast_ref::<serde_json::Error>().is_some() => "json",
        None => "invalid_input",
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let info = RunInfo {
        command: cli.command.name(),
        seed: cli.seed.unwrap_or(0),
        threads,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Vocab(c) => vocab::run(c, &info),
        Command::Hash(c) => hash::run(c, &info),
        Command::Plan(a) => plan::run(a, &info),
        Command::Layer(c) => layer::run(c, &info, cli.seed),
        Command::Store(c) => store::run(c, &info),
        Command::Analyze(c) => analyze::run(c, &info),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let diag = json!({
                "error": {
                    "kind": error_kind(&err),
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{diag}");
            ExitCode::from(2)
        }
    }
}
