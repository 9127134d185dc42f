use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use engram_core::analysis::export_gate_heatmap;
use engram_core::io::{read_tables, to_f32_tensor, write_tables, write_tensor};
use engram_core::layer::toy::{sequence_tokens, train_toy, ToyConfig};
use engram_core::layer::{engram_layer_backward, engram_layer_forward, EngramForwardTape, EngramLayerWeights};
use engram_core::store::ShardedStore;
use serde::Serialize;
use serde_json::json;

use crate::config::EngramConfig;
use crate::report::{emit, RunInfo};
use crate::util::{branches, load_projection, read_3d, read_tokens, write_branches};

#[derive(Subcommand, Debug)]
pub enum LayerCmd {
    /// Write initial weights and tables for every placement in a config.
    Init(InitArgs),
    /// Run one layer and write its output `Y` as `[M, T, d]`.
    Forward(ForwardArgs),
    /// Run one layer forward and backward against a given output gradient.
    Backward(BackwardArgs),
    /// Train the toy bigram-memorization task.
    TrainToy(ToyArgs),
}

impl LayerCmd {
    pub fn name(&self) -> &'static str {
        match self {
            LayerCmd::Init(_) => "init",
            LayerCmd::Forward(_) => "forward",
            LayerCmd::Backward(_) => "backward",
            LayerCmd::TrainToy(_) => "train-toy",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Weights output (EGLW).
    #[arg(long)]
    weights: PathBuf,
    /// Tables output (EGTB), one set per placement.
    #[arg(long)]
    tables: PathBuf,
    /// Start tables at zero instead of the configured normal.
    #[arg(long)]
    zero_tables: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    tables: PathBuf,
    /// Whitespace-separated raw token ids.
    #[arg(long)]
    tokens: PathBuf,
    /// Hidden states `[M, T, d]` (.egts).
    #[arg(long)]
    hidden: PathBuf,
    /// Placement depth whose tables to use; defaults to the first.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ForwardArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output `Y` (.egts).
    #[arg(long)]
    out: PathBuf,
    /// Gate values `[M, T]` (.egts).
    #[arg(long)]
    gates: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BackwardArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output gradient `dY` `[M, T, d]` (.egts).
    #[arg(long)]
    grad: PathBuf,
    /// Directory for d_hidden.egts, grad_e.egts and grad_weights.eglw.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ToyArgs {
    /// JSON toy config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Force every gate to zero (memory path removed).
    #[arg(long)]
    gate_off: bool,
    /// Gate heatmap of the first evaluation sequences.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Branches kept in the heatmap, e.g. `0,1`.
    #[arg(long)]
    select: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_store(cfg: &EngramConfig, path: &Path, depth: Option<usize>) -> Result<(usize, ShardedStore<f32>)> {
    let depth = depth.unwrap_or(cfg.placements[0]);
    if !cfg.placements.contains(&depth) {
        bail!("depth {depth} is not among the placements {:?}", cfg.placements);
    }
    let tables: Vec<_> = read_tables(path)
        .with_context(|| format!("reading tables {}", path.display()))?
        .into_iter()
        .filter(|t| t.id.layer as usize == depth)
        .collect();
    if tables.is_empty() {
        bail!("no tables for depth {depth} in {}", path.display());
    }
    let store = ShardedStore::from_tables(tables, cfg.shards)?;
    let ngram = cfg.ngram()?;
    if store.keys() != ngram.table_keys().as_slice() || store.table_sizes() != ngram.table_sizes() {
        bail!("tables in {} do not match the configured orders, heads and sizes", path.display());
    }
    Ok((depth, store))
}

fn forward(args: &RunArgs) -> Result<(EngramConfig, EngramLayerWeights, EngramForwardTape, Vec<ndarray::Array2<f64>>)> {
    let cfg = EngramConfig::load(&args.config)?;
    let weights = EngramLayerWeights::read_file(&args.weights)
        .with_context(|| format!("reading weights {}", args.weights.display()))?;
    if weights.dims != cfg.dims() {
        bail!("weights have dims {:?}, config implies {:?}", weights.dims, cfg.dims());
    }
    let (_, store) = load_store(&cfg, &args.tables, args.depth)?;
    let projection = load_projection(cfg.projection.as_deref(), cfg.vocab_size)?;
    let tokens = read_tokens(&args.tokens)?;
    let hidden = branches(&read_3d(&args.hidden)?);
    let (ys, tape) = engram_layer_forward(&tokens, &hidden, &projection, &cfg.ngram()?, &store, &weights)?;
    Ok((cfg, weights, tape, ys))
}

fn max_abs<'a>(xs: impl IntoIterator<Item = &'a f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, &x| m.max(x.abs()))
}

pub fn run(cmd: LayerCmd, info: &RunInfo, seed: Option<u64>) -> Result<()> {
    match cmd {
        LayerCmd::Init(args) => {
            let mut cfg = EngramConfig::load(&args.config)?;
            if let Some(s) = seed {
                cfg.init.seed = s;
            }
            let weights = EngramLayerWeights::init(cfg.dims(), &cfg.init)?;
            weights.write_file(&args.weights)?;
            let ngram = cfg.ngram()?;
            let mut tables = Vec::new();
            for (i, &depth) in cfg.placements.iter().enumerate() {
                let store = if args.zero_tables {
                    ShardedStore::<f32>::zeros(depth as u32, &ngram.table_keys(), ngram.table_sizes(), cfg.d_sub(), 1)?
                } else {
                    let table_seed = cfg.init.seed.wrapping_add(1 + i as u64);
                    ShardedStore::<f32>::random_normal(
                        depth as u32,
                        &ngram.table_keys(),
                        ngram.table_sizes(),
                        cfg.d_sub(),
                        cfg.init.table_std,
                        table_seed,
                        1,
                    )?
                };
                tables.extend(store.to_tables());
            }
            write_tables(&args.tables, &tables)?;
            let result = json!({
                "dims": weights.dims,
                "dense_params": weights.param_count(),
                "table_sizes": ngram.table_sizes(),
                "embedding_params": tables.iter().map(|t| t.data.len()).sum::<usize>(),
            });
            emit(info, json!({"args": &args, "config": cfg}), result, args.report.as_deref())
        }
        LayerCmd::Forward(args) => {
            let (cfg, _, tape, ys) = forward(&args.run)?;
            write_branches(&args.out, &ys)?;
            if let Some(path) = &args.gates {
                let alphas = tape.alphas();
                let t_len = tape.positions();
                let stacked = ndarray::Array2::from_shape_fn((alphas.len(), t_len), |(m, t)| alphas[m][t]);
                write_tensor(path, &to_f32_tensor(&stacked))?;
            }
            let result = json!({
                "positions": tape.positions(),
                "branches": tape.branches(),
                "max_abs_output": max_abs(ys.iter().flatten()),
                "mean_gate": tape.alphas().iter().map(|a| a.mean().unwrap_or(0.0)).collect::<Vec<_>>(),
            });
            emit(info, json!({"args": &args, "config": cfg}), result, args.run.report.as_deref())
        }
        LayerCmd::Backward(args) => {
            let (cfg, weights, tape, _) = forward(&args.run)?;
            let dy = branches(&read_3d(&args.grad)?);
            let grads = engram_layer_backward(&tape, &dy, &weights)?;
            std::fs::create_dir_all(&args.out_dir)?;
            write_branches(&args.out_dir.join("d_hidden.egts"), &grads.d_hidden)?;
            write_tensor(args.out_dir.join("grad_e.egts"), &to_f32_tensor(&grads.grad_e))?;
            grads.weights.write_file(args.out_dir.join("grad_weights.eglw"))?;
            let norms: Vec<_> = grads
                .weights
                .tensor_names()
                .into_iter()
                .zip(grads.weights.tensors())
                .map(|(n, t)| json!({"tensor": n, "l2": t.iter().map(|x| x * x).sum::<f64>().sqrt()}))
                .collect();
            let result = json!({
                "grad_e_l2": grads.grad_e.iter().map(|x| x * x).sum::<f64>().sqrt(),
                "weight_grad_norms": norms,
            });
            emit(info, json!({"args": &args, "config": cfg}), result, args.run.report.as_deref())
        }
        LayerCmd::TrainToy(args) => {
            let mut cfg = match &args.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("parsing toy config")?,
                None => ToyConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            if args.gate_off {
                cfg.gate_override = Some(0.0);
            }
            let (report, model, patterns) = train_toy(&cfg)?;
            if let Some(path) = &args.heatmap {
                let select = args.select.as_deref().map(crate::util::parse_list::<usize>).transpose()?;
                let pairs = &patterns[..cfg.pairs_per_sequence.min(patterns.len())];
                let tokens = sequence_tokens(pairs);
                let trace = model.trace(&tokens)?;
                let text: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                let heatmap = export_gate_heatmap(&text, &[trace.alphas], None, select.as_deref())?;
                std::fs::write(path, serde_json::to_string_pretty(&heatmap)? + "\n")?;
            }
            let result = json!({
                "report": report,
                "gate_delta": report.gate_delta(),
            });
            emit(info, json!({"args": &args, "toy": cfg}), result, args.report.as_deref())
        }
    }
}
