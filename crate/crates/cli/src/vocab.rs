use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use engram_core::vocab::{build_projection, read_vocab_file, NormalizeOptions};
use serde::Serialize;

use crate::report::{emit, RunInfo};

#[derive(Subcommand, Debug)]
pub enum VocabCmd {
    /// Build the canonical-id projection from a JSONL vocabulary.
    Build(BuildArgs),
}

impl VocabCmd {
    pub fn name(&self) -> &'static str {
        match self {
            VocabCmd::Build(_) => "build",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct BuildArgs {
    /// JSONL vocabulary, one {"id", "surface_base64", "special"} object per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Projection output (EGVP).
    #[arg(long)]
    out: PathBuf,
    /// JSON report; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Merge groups listed in the report.
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long)]
    no_nfkc: bool,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    no_collapse_whitespace: bool,
    #[arg(long)]
    no_strip_diacritics: bool,
}

pub fn run(cmd: VocabCmd, info: &RunInfo) -> Result<()> {
    let VocabCmd::Build(args) = cmd;
    let opts = NormalizeOptions {
        nfkc: !args.no_nfkc,
        lowercase: !args.no_lowercase,
        collapse_whitespace: !args.no_collapse_whitespace,
        strip_diacritics: !args.no_strip_diacritics,
    };
    let vocab = read_vocab_file(&args.input).with_context(|| format!("reading vocabulary {}", args.input.display()))?;
    let built = build_projection(&vocab, &opts)?;
    built.projection.write_file(&args.out)?;
    let report = built.report(&vocab, &opts, args.top);
    emit(info, serde_json::to_value(&args)?, report, args.report.as_deref())
}
