use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use engram_core::planner::{
    fit_power_law, realized_rho, slot_accounting, slots_for_params, split_budget, AllocationSpec,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::report::{emit, RunInfo};

/// Every section is optional; the report holds those whose inputs were given.
#[derive(Args, Debug, Serialize)]
pub struct PlanArgs {
    /// Total parameters (accepts 26.7e9 notation).
    #[arg(long)]
    p_tot: Option<f64>,
    /// Activated parameters per token.
    #[arg(long)]
    p_act: Option<f64>,
    /// Share of the sparse budget given to routed experts.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    per_expert_params: Option<f64>,
    #[arg(long, default_value_t = 6)]
    top_k: u64,
    #[arg(long, default_value_t = 0)]
    shared_experts: u64,
    /// Parameters per memory slot.
    #[arg(long)]
    d_sub: Option<u64>,
    /// Routed experts of the pure-MoE baseline; sets P_tot when given.
    #[arg(long)]
    baseline_routed: Option<u64>,
    /// Routed experts after reallocation, for the realized split.
    #[arg(long)]
    engram_routed: Option<u64>,
    /// Engram layers, for slot accounting.
    #[arg(long)]
    layers: Option<u64>,
    /// Tables per layer, for slot accounting.
    #[arg(long)]
    tables: Option<u64>,
    /// Slots to account for.
    #[arg(long)]
    slots: Option<u64>,
    /// Embedding parameter target to solve slots for.
    #[arg(long)]
    target_params: Option<f64>,
    /// JSON list of [slots, loss] pairs for a log-linear fit.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn count(x: f64, name: &str) -> Result<u64> {
    if x.is_nan() || x < 0.0 || x.is_infinite() {
        bail!("{name} must be a non-negative number");
    }
    Ok(x.round() as u64)
}

pub fn run(args: PlanArgs, info: &RunInfo) -> Result<()> {
    let mut result = Map::new();

    if let (Some(rho), Some(pe), Some(d_sub)) = (args.rho, args.per_expert_params, args.d_sub) {
        let per_expert = count(pe, "per-expert-params")?;
        let p_act = count(args.p_act.unwrap_or(0.0), "p-act")?;
        let spec = match (args.baseline_routed, args.p_tot) {
            (Some(routed), _) => AllocationSpec::from_baseline(routed, args.top_k, per_expert, p_act, d_sub, rho)?,
            (None, Some(p_tot)) => AllocationSpec {
                p_tot: count(p_tot, "p-tot")?,
                p_act,
                per_expert_params: per_expert,
                top_k: args.top_k,
                shared_experts: args.shared_experts,
                per_slot_params: d_sub,
                rho,
            },
            (None, None) => bail!("budget split needs --p-tot or --baseline-routed"),
        };
        result.insert("spec".into(), serde_json::to_value(spec)?);
        result.insert("split".into(), serde_json::to_value(split_budget(&spec)?)?);
    }

    if let (Some(base), Some(eng)) = (args.baseline_routed, args.engram_routed) {
        result.insert("realized_rho".into(), json!(realized_rho(base, eng, args.top_k)?));
    }

    if let (Some(layers), Some(tables), Some(d_sub)) = (args.layers, args.tables, args.d_sub) {
        if let Some(slots) = args.slots {
            result.insert(
                "slot_accounting".into(),
                serde_json::to_value(slot_accounting(layers, tables, slots, d_sub))?,
            );
        }
        if let Some(target) = args.target_params {
            let slots = slots_for_params(count(target, "target-params")?, layers, tables, d_sub)?;
            result.insert("slots_for_target".into(), json!(slots));
        }
    }

    if let Some(path) = &args.fit {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let points: Vec<(f64, f64)> = serde_json::from_str(&text).context("fit points must be [[slots, loss], ...]")?;
        result.insert("power_law".into(), serde_json::to_value(fit_power_law(&points)?)?);
    }

    if result.is_empty() {
        bail!("nothing to compute: give --rho/--per-expert-params/--d-sub, --baseline-routed/--engram-routed, --layers/--tables/--d-sub with --slots or --target-params, or --fit");
    }
    emit(info, serde_json::to_value(&args)?, Value::Object(result), args.out.as_deref())
}
