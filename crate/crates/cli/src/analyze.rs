use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use engram_core::analysis::{
    cka_matrix, cka_self_matrix, export_gate_heatmap, logitlens_curve, soft_alignment, HiddenDump, TokenMeta,
};
use ndarray::{Array1, Array2};
use serde::Serialize;
use serde_json::json;

use crate::report::{emit, RunInfo};
use crate::util::{parse_list, read_2d, read_3d};

#[derive(Subcommand, Debug)]
pub enum AnalyzeCmd {
    /// Per-layer KL between lens and final distributions.
    Logitlens(LensArgs),
    /// Layer-by-layer linear CKA matrix.
    Cka(CkaArgs),
    /// Soft alignment index from a similarity matrix.
    Align(AlignArgs),
    /// Gate heatmap JSON from a gate dump.
    Gates(GateArgs),
}

impl AnalyzeCmd {
    pub fn name(&self) -> &'static str {
        match self {
            AnalyzeCmd::Logitlens(_) => "logitlens",
            AnalyzeCmd::Cka(_) => "cka",
            AnalyzeCmd::Align(_) => "align",
            AnalyzeCmd::Gates(_) => "gates",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct LensArgs {
    /// Hidden states `[L, T, d]` (.egts).
    #[arg(long)]
    hidden: PathBuf,
    /// LM head `[d, V]` (.egts).
    #[arg(long)]
    lm_head: PathBuf,
    /// Final logits `[T, V]` (.egts).
    #[arg(long)]
    final_logits: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CkaArgs {
    /// Hidden states of model A `[L, T, d]`.
    #[arg(long)]
    a: PathBuf,
    /// JSON token metadata for A; entity spans select rows.
    #[arg(long)]
    meta_a: Option<PathBuf>,
    /// Hidden states of model B; self-similarity of A when omitted.
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    meta_b: Option<PathBuf>,
    /// Rows per HSIC batch; full batch when omitted.
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AlignArgs {
    /// Similarity JSON: a `cka` report or `{"values": [[...]]}`.
    #[arg(long)]
    similarity: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GateArgs {
    /// Gates `[layers, branches, T]` (.egts).
    #[arg(long)]
    alpha: PathBuf,
    /// JSON token metadata providing `token_text`.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Branches to keep, e.g. `1` or `0,2`.
    #[arg(long)]
    select: Option<String>,
    /// Backbone depth of each Engram layer, e.g. `2,15`.
    #[arg(long)]
    layer_ids: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_meta(path: Option<&PathBuf>) -> Result<TokenMeta> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).context("parsing token metadata")?)
        }
        None => Ok(TokenMeta::default()),
    }
}

fn load_dump(path: &std::path::Path, meta: Option<&PathBuf>) -> Result<HiddenDump> {
    Ok(HiddenDump::new(read_3d(path)?, load_meta(meta)?)?)
}

pub fn run(cmd: AnalyzeCmd, info: &RunInfo) -> Result<()> {
    match cmd {
        AnalyzeCmd::Logitlens(args) => {
            let dump = load_dump(&args.hidden, None)?;
            let curve = logitlens_curve(&dump, &read_2d(&args.lm_head)?, &read_2d(&args.final_logits)?)?;
            emit(info, serde_json::to_value(&args)?, curve, args.out.as_deref())
        }
        AnalyzeCmd::Cka(args) => {
            let a = load_dump(&args.a, args.meta_a.as_ref())?.layer_features();
            let matrix = match &args.b {
                Some(b) => cka_matrix(&a, &load_dump(b, args.meta_b.as_ref())?.layer_features(), args.minibatch)?,
                None => cka_self_matrix(&a, args.minibatch)?,
            };
            emit(info, serde_json::to_value(&args)?, matrix, args.out.as_deref())
        }
        AnalyzeCmd::Align(args) => {
            let text = std::fs::read_to_string(&args.similarity)
                .with_context(|| format!("reading {}", args.similarity.display()))?;
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            let body = doc.get("result").unwrap_or(&doc);
            let values: Vec<Vec<f64>> = serde_json::from_value(body.get("values").cloned().unwrap_or_default())
                .context("similarity JSON needs a `values` matrix")?;
            let cols = values.first().map_or(0, Vec::len);
            if values.iter().any(|r| r.len() != cols) {
                bail!("similarity rows differ in length");
            }
            let s = Array2::from_shape_fn((values.len(), cols), |(i, j)| values[i][j]);
            let a = soft_alignment(s.view(), args.k)?;
            emit(info, serde_json::to_value(&args)?, json!({"k": args.k, "alignment": a}), args.out.as_deref())
        }
        AnalyzeCmd::Gates(args) => {
            let alpha = read_3d(&args.alpha)?;
            let (layers, br, t_len) = alpha.dim();
            let series: Vec<Vec<Array1<f64>>> = (0..layers)
                .map(|l| (0..br).map(|b| alpha.slice(ndarray::s![l, b, ..]).to_owned()).collect())
                .collect();
            let meta = load_meta(args.meta.as_ref())?;
            let text = if meta.token_text.is_empty() {
                (0..t_len)
                    .map(|t| meta.token_ids.get(t).map_or_else(|| t.to_string(), |id| id.to_string()))
                    .collect()
            } else {
                meta.token_text
            };
            let select = args.select.as_deref().map(parse_list::<usize>).transpose()?;
            let ids = args.layer_ids.as_deref().map(parse_list::<usize>).transpose()?;
            let heatmap = export_gate_heatmap(&text, &series, ids.as_deref(), select.as_deref())?;
            emit(info, serde_json::to_value(&args)?, heatmap, args.out.as_deref())
        }
    }
}
