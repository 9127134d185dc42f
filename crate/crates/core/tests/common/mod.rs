//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls the code path it is used to check.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use engram_core::layer::{
    engram_layer_backward, forward_memory, EngramLayerWeights, InitConfig, LayerDims, CONV_WIDTH,
};
use engram_core::vocab::{read_vocab_file, VocabEntry};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

#[derive(Debug, Deserialize)]
pub struct GoldenCase {
    pub global_seed: String,
    pub order: usize,
    pub head: usize,
    pub seed: String,
    pub table_size: u64,
    pub gram: Vec<u32>,
    pub index: u64,
}

#[derive(Deserialize)]
struct GoldenFile {
    cases: Vec<GoldenCase>,
}

/// Hash vectors generated by a separate script, checked into the repo.
pub fn golden_cases() -> Vec<GoldenCase> {
    let text = std::fs::read_to_string(data_path("golden_hash.json")).unwrap();
    serde_json::from_str::<GoldenFile>(&text).unwrap().cases
}

/// The synthetic vocabulary and each token's expected merge label.
pub fn synthetic_vocab() -> (Vec<VocabEntry>, HashMap<u32, String>) {
    #[derive(Deserialize)]
    struct Line {
        id: u32,
        group: String,
    }
    let path = data_path("synthetic_vocab.jsonl");
    let vocab = read_vocab_file(&path).unwrap();
    let labels = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: Line = serde_json::from_str(l).unwrap();
            (line.id, line.group)
        })
        .collect();
    (vocab, labels)
}

/// Checks that two tokens share a canonical id exactly when they share a label.
/// Returns the number of disagreeing pairs.
pub fn partition_mismatches(table: &[u32], labels: &HashMap<u32, String>) -> usize {
    let mut by_label: HashMap<&str, Vec<u32>> = HashMap::new();
    for (&id, label) in labels {
        by_label.entry(label.as_str()).or_default().push(id);
    }
    let mut bad = 0;
    for ids in by_label.values() {
        let first = table[ids[0] as usize];
        bad += ids.iter().filter(|&&i| table[i as usize] != first).count();
    }
    let mut owner: HashMap<u32, &str> = HashMap::new();
    for (&id, label) in labels {
        if let Some(prev) = owner.insert(table[id as usize], label.as_str()) {
            if prev != label {
                bad += 1;
            }
        }
    }
    bad
}

/// Definition-level unbiased HSIC: average over ordered distinct 4-tuples of
/// `k_ij l_ij + k_ij l_qr - 2 k_ij l_iq`. O(n^4).
pub fn hsic_quartic(k: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        for j in 0..n {
            for q in 0..n {
                for r in 0..n {
                    if i == j || i == q || i == r || j == q || j == r || q == r {
                        continue;
                    }
                    sum += k[[i, j]] * l[[i, j]] + k[[i, j]] * l[[q, r]] - 2.0 * k[[i, j]] * l[[i, q]];
                    count += 1.0;
                }
            }
        }
    }
    sum / count
}

/// Column-centered linear Gram matrix, written out with plain loops.
pub fn gram_naive(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut c = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64;
        for i in 0..n {
            c[[i, j]] -= mean;
        }
    }
    Array2::from_shape_fn((n, n), |(a, b)| (0..d).map(|j| c[[a, j]] * c[[b, j]]).sum())
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let a = random_matrix(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for p in 0..j {
            let qp = q.column(p).to_owned();
            let dot = v.dot(&qp);
            v -= &(qp * dot);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

/// A random small layer instance with every parameter away from its init.
pub struct LayerInstance {
    pub hidden: Vec<Array2<f64>>,
    pub e: Array2<f64>,
    pub weights: EngramLayerWeights,
    pub dy: Vec<Array2<f64>>,
}

pub fn layer_instance(seed: u64, t_len: usize, d: usize, d_mem: usize, branches: usize, dilation: usize) -> LayerInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = EngramLayerWeights::init(
        LayerDims::new(d, d_mem, branches, dilation),
        &InitConfig {
            seed: rng.random(),
            ..Default::default()
        },
    )
    .unwrap();
    w.conv_kernel = random_matrix(&mut rng, d, CONV_WIDTH) * 0.5;
    for g in [&mut w.gain_h, &mut w.gain_k, &mut w.gain_conv] {
        g.mapv_inplace(|_| rng.random_range(0.5..1.5));
    }
    w.conv_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    LayerInstance {
        hidden: (0..branches).map(|_| random_matrix(&mut rng, t_len, d)).collect(),
        e: random_matrix(&mut rng, t_len, d_mem),
        dy: (0..branches).map(|_| random_matrix(&mut rng, t_len, d)).collect(),
        weights: w,
    }
}

fn probe(inst: &LayerInstance, hidden: &[Array2<f64>], e: &Array2<f64>, w: &EngramLayerWeights) -> f64 {
    let (ys, _) = forward_memory(hidden, e, w).unwrap();
    ys.iter().zip(&inst.dy).map(|(y, g)| (y * g).sum()).sum()
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct FdOutcome {
    pub checked: usize,
    /// Largest `|fd - analytic| / (atol + rtol |fd|)`; at most 1 passes.
    pub worst_ratio: f64,
    pub worst_at: String,
}

/// Central differences of `sum <dY, Y>` wrt every weight, memory entry and
/// hidden entry.
pub fn fd_check(inst: &LayerInstance, step: f64, rtol: f64, atol: f64) -> FdOutcome {
    let (_, tape) = forward_memory(&inst.hidden, &inst.e, &inst.weights).unwrap();
    let g = engram_layer_backward(&tape, &inst.dy, &inst.weights).unwrap();
    let mut out = FdOutcome {
        checked: 0,
        worst_ratio: 0.0,
        worst_at: String::new(),
    };
    let mut record = |fd: f64, an: f64, at: &dyn Fn() -> String| {
        let ratio = (fd - an).abs() / (atol + rtol * fd.abs());
        out.checked += 1;
        if ratio > out.worst_ratio {
            out.worst_ratio = ratio;
            out.worst_at = at();
        }
    };

    let flat = inst.weights.flatten();
    let analytic = g.weights.flatten();
    let mut w = inst.weights.clone();
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] = flat[i] + step;
        w.unflatten(&p);
        let up = probe(inst, &inst.hidden, &inst.e, &w);
        p[i] = flat[i] - step;
        w.unflatten(&p);
        let dn = probe(inst, &inst.hidden, &inst.e, &w);
        record((up - dn) / (2.0 * step), analytic[i], &|| format!("weight {i}"));
    }

    for ((t, j), &x) in inst.e.indexed_iter() {
        let mut e = inst.e.clone();
        e[[t, j]] = x + step;
        let up = probe(inst, &inst.hidden, &e, &inst.weights);
        e[[t, j]] = x - step;
        let dn = probe(inst, &inst.hidden, &e, &inst.weights);
        record((up - dn) / (2.0 * step), g.grad_e[[t, j]], &|| format!("e[{t},{j}]"));
    }

    for m in 0..inst.hidden.len() {
        for ((t, j), &x) in inst.hidden[m].indexed_iter() {
            let mut h = inst.hidden.clone();
            h[m][[t, j]] = x + step;
            let up = probe(inst, &h, &inst.e, &inst.weights);
            h[m][[t, j]] = x - step;
            let dn = probe(inst, &h, &inst.e, &inst.weights);
            record((up - dn) / (2.0 * step), g.d_hidden[m][[t, j]], &|| format!("h[{m}][{t},{j}]"));
        }
    }
    out
}

/// Random instance sizes inside T <= 8, d <= 16, d_mem <= 12.
pub fn fd_instance(seed: u64, branches: usize) -> LayerInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let t_len = rng.random_range(1..=8);
    let d = rng.random_range(2..=16);
    let d_mem = rng.random_range(1..=12);
    let dilation = rng.random_range(1..=3);
    layer_instance(seed, t_len, d, d_mem, branches, dilation)
}

/// A random f64 store with its hashing config and a random plan over it.
pub fn random_store_plan(
    seed: u64,
    shards: usize,
) -> (engram_core::store::ShardedStore<f64>, engram_core::hasher::RetrievalPlan) {
    use engram_core::hasher::{plan_retrieval, NGramConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<u64> = (0..4).map(|_| [11u64, 13, 17, 19, 23, 29][rng.random_range(0..6)]).collect();
    let cfg = NGramConfig::new(vec![2, 3], 2, rng.random(), sizes).unwrap();
    let dim = rng.random_range(1..=5);
    let store = engram_core::store::ShardedStore::random_normal(0, &cfg.table_keys(), cfg.table_sizes(), dim, 1.0, rng.random(), shards)
        .unwrap();
    let t_len = rng.random_range(1..=40);
    let ids: Vec<u32> = (0..t_len).map(|_| rng.random_range(0..12)).collect();
    (store, plan_retrieval(&ids, &cfg, 12))
}

/// `<G u, v>` and `<u, G^T v>` for the store contents `u` and a random `v`.
/// The right side reads the staged gradients table by table, row by row.
pub fn adjoint_pair(seed: u64, shards: usize) -> (f64, f64) {
    let (mut store, plan) = random_store_plan(seed, shards);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA5A5));
    let v = random_matrix(&mut rng, plan.positions(), store.mem_dim());
    let lhs = (&store.gather(&plan).unwrap() * &v).sum();
    store.scatter_add(&plan, v.view()).unwrap();
    let mut rhs = 0.0;
    for slot in 0..store.table_count() {
        for row in 0..store.table_sizes()[slot] {
            if let Some(g) = store.staged_grad(slot, row) {
                rhs += store.row(slot, row).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    (lhs, rhs)
}
