use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use engram_core::hasher::plan_retrieval;
use engram_core::io::read_tables;
use engram_core::store::{prefetch_execute, run_pipelined, ComputeTrace, PlacedLayer, ShardedStore, TierConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::EngramConfig;
use crate::report::{emit, RunInfo};
use crate::util::{load_projection, read_tokens};

#[derive(Subcommand, Debug)]
pub enum StoreCmd {
    /// Simulate prefetch overlap of table fetches with backbone compute.
    BenchOverlap(OverlapArgs),
}

impl StoreCmd {
    pub fn name(&self) -> &'static str {
        match self {
            StoreCmd::BenchOverlap(_) => "bench-overlap",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct OverlapArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    /// Whitespace-separated raw token ids, split into steps.
    #[arg(long)]
    tokens: PathBuf,
    /// Tier config JSON; overrides the config's `tier` section.
    #[arg(long)]
    tiers: Option<PathBuf>,
    /// Backbone layers in the compute trace; defaults to last placement + 1.
    #[arg(long)]
    backbone_layers: Option<usize>,
    /// Simulated compute per backbone layer, microseconds.
    #[arg(long, default_value_t = 100.0)]
    layer_us: f64,
    #[arg(long, default_value_t = 512)]
    tokens_per_step: usize,
    /// Also time a real producer/consumer gather pipeline of this depth.
    #[arg(long)]
    wall_clock_depth: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run(cmd: StoreCmd, info: &RunInfo) -> Result<()> {
    let StoreCmd::BenchOverlap(args) = cmd;
    let cfg = EngramConfig::load(&args.config)?;
    let tiers: TierConfig = match &args.tiers {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("parsing tier config")?,
        None => cfg.tier,
    };
    if args.tokens_per_step == 0 {
        bail!("tokens-per-step must be positive");
    }
    let ngram = cfg.ngram()?;
    let all = read_tables(&args.tables).with_context(|| format!("reading tables {}", args.tables.display()))?;
    let mut stores = Vec::new();
    for &depth in &cfg.placements {
        let tables: Vec<_> = all.iter().filter(|t| t.id.layer as usize == depth).cloned().collect();
        if tables.is_empty() {
            bail!("no tables for depth {depth}");
        }
        stores.push((depth, ShardedStore::from_tables(tables, cfg.shards)?));
    }
    let projection = load_projection(cfg.projection.as_deref(), cfg.vocab_size)?;
    let ids = projection.project_all(&read_tokens(&args.tokens)?)?;
    let plans: Vec<_> = ids
        .chunks(args.tokens_per_step)
        .map(|chunk| plan_retrieval(chunk, &ngram, projection.sentinel_id()))
        .collect();
    let steps: Vec<Vec<_>> = plans.iter().map(|p| vec![p.clone(); stores.len()]).collect();
    let layers: Vec<PlacedLayer<'_, f32>> = stores.iter().map(|(depth, s)| PlacedLayer { depth: *depth, store: s }).collect();
    let backbone = args.backbone_layers.unwrap_or(cfg.placements.last().unwrap() + 1);
    let trace = ComputeTrace::uniform(backbone, args.layer_us);
    let overlap = prefetch_execute(&layers, &steps, &tiers, &trace)?;
    let wall = match args.wall_clock_depth {
        Some(depth) => {
            let mut rows = 0usize;
            let stats = run_pipelined(&stores[0].1, &plans, depth, |_, e| rows += e.nrows())?;
            Some(json!({
                "steps": stats.steps,
                "rows": rows,
                "wall_us": stats.wall.as_secs_f64() * 1e6,
                "consumer_wait_us": stats.consumer_wait.as_secs_f64() * 1e6,
            }))
        }
        None => None,
    };
    let result = json!({
        "stall_time_us": overlap.stall_time_us,
        "total_compute_us": overlap.total_compute_us,
        "throughput_penalty": overlap.throughput_penalty,
        "hot_hit_rate": overlap.hot_hit_rate,
        "bytes_fetched": overlap.bytes_fetched,
        "steps": overlap.steps,
        "wall_clock": wall,
    });
    emit(info, json!({"args": &args, "config": cfg, "tiers": tiers}), result, args.report.as_deref())
}
