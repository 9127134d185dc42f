use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use engram_core::hasher::{hash_stats, plan_retrieval, HashConfigSpec, RetrievalPlan};
use serde::Serialize;
use serde_json::json;

use crate::report::{emit, RunInfo};
use crate::util::{load_projection, read_tokens};

#[derive(Subcommand, Debug)]
pub enum HashCmd {
    /// Compute the retrieval plan of a token sequence.
    Plan(PlanArgs),
    /// Collision and uniformity statistics of a plan.
    Stats(StatsArgs),
}

impl HashCmd {
    pub fn name(&self) -> &'static str {
        match self {
            HashCmd::Plan(_) => "plan",
            HashCmd::Stats(_) => "stats",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct Source {
    /// Hash config JSON: {orders, K, global_seed, budget[, budget_mode, table_sizes]}.
    #[arg(long)]
    config: PathBuf,
    /// Whitespace-separated raw token ids.
    #[arg(long)]
    tokens: PathBuf,
    /// Canonical projection (EGVP); identity when omitted.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Raw vocabulary size for the identity projection; defaults to max id + 1.
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Args, Debug, Serialize)]
pub struct PlanArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    source: Source,
    /// Previously written plan; recomputed from the tokens when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn prepare(src: &Source) -> Result<(HashConfigSpec, Vec<u32>, u32, RetrievalPlan)> {
    let text = std::fs::read_to_string(&src.config).with_context(|| format!("reading {}", src.config.display()))?;
    let spec: HashConfigSpec = serde_json::from_str(&text).context("parsing hash config")?;
    let cfg = spec.build()?;
    let tokens = read_tokens(&src.tokens)?;
    let vocab_size = src
        .vocab_size
        .or_else(|| tokens.iter().max().map(|&m| m + 1))
        .unwrap_or(1);
    let projection = load_projection(src.projection.as_deref(), Some(vocab_size))?;
    let ids = projection.project_all(&tokens)?;
    let sentinel = projection.sentinel_id();
    let plan = plan_retrieval(&ids, &cfg, sentinel);
    Ok((spec, ids, sentinel, plan))
}

pub fn run(cmd: HashCmd, info: &RunInfo) -> Result<()> {
    match cmd {
        HashCmd::Plan(args) => {
            let (spec, _, _, plan) = prepare(&args.source)?;
            let config = json!({"args": &args, "hash": spec});
            emit(info, config, plan, args.out.as_deref())
        }
        HashCmd::Stats(args) => {
            let (spec, ids, sentinel, computed) = prepare(&args.source)?;
            let plan = match &args.plan {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let doc: serde_json::Value = serde_json::from_str(&text)?;
                    // accept a bare plan or a report wrapping one
                    let body = doc.get("result").cloned().unwrap_or(doc);
                    serde_json::from_value::<RetrievalPlan>(body).context("parsing plan")?
                }
                None => computed,
            };
            let stats = hash_stats(&ids, &plan, sentinel)?;
            let config = json!({"args": &args, "hash": spec});
            emit(info, config, stats, args.report.as_deref())
        }
    }
}
