use std::path::Path;
use std::process::{Command, Output};

use engram_core::io::{to_f32_tensor, write_tensor};
use ndarray::{Array2, Array3};
use serde_json::Value;
use tempfile::TempDir;

fn engram(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_engram"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = engram(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    if out.stdout.is_empty() {
        return Value::Null;
    }
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn wave(shape: (usize, usize, usize), phase: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |(a, b, c)| ((a * 7 + b * 3 + c) as f64 * 0.37 + phase).sin())
}

const LAYER_CFG: &str = r#"{"vocab_size": 50, "orders": [2, 3], "K": 2, "slot_budget": {"slots": 400},
    "hidden": 8, "d_mem": 8, "branches": 2, "placements": [1, 3]}"#;

fn layer_fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    std::fs::write(p.join("cfg.json"), LAYER_CFG).unwrap();
    std::fs::write(p.join("toks.txt"), "3 14 15 9 26 5 35 8 9 7 9 3").unwrap();
    write_tensor(p.join("h.egts"), &to_f32_tensor(&wave((2, 12, 8), 0.0))).unwrap();
    write_tensor(p.join("dy.egts"), &to_f32_tensor(&wave((2, 12, 8), 1.0))).unwrap();
    dir
}

#[test]
fn plan_reproduces_expert_counts() {
    let dir = TempDir::new().unwrap();
    let v = ok_json(dir.path(), &["plan", "--baseline-routed", "72", "--engram-routed", "55"]);
    let rho = v["result"]["realized_rho"].as_f64().unwrap();
    assert!((rho - 49.0 / 66.0).abs() < 1e-12);
    let v = ok_json(
        dir.path(),
        &["plan", "--baseline-routed", "106", "--rho", "0.4", "--per-expert-params", "1e6", "--p-act", "3e9", "--d-sub", "1280"],
    );
    assert_eq!(v["result"]["split"]["routed_experts_total"], 46);
    assert_eq!(v["tool"], "engram");
    assert_eq!(v["command"], "plan");
}

#[test]
fn plan_slot_accounting_and_fit() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("fit.json"), "[[1e5, 2.5], [1e6, 2.4], [1e7, 2.3]]").unwrap();
    let v = ok_json(
        dir.path(),
        &["plan", "--layers", "2", "--tables", "16", "--d-sub", "80", "--target-params", "18.5e9", "--fit", "fit.json"],
    );
    assert_eq!(v["result"]["slots_for_target"], 7_226_562);
    let slope = v["result"]["power_law"]["slope"].as_f64().unwrap();
    assert!((slope + 0.1 / 10f64.ln()).abs() < 1e-9);
}

#[test]
fn vocab_build_reports_merges() {
    let dir = TempDir::new().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/synthetic_vocab.jsonl");
    let src = src.to_str().unwrap();
    let v = ok_json(dir.path(), &["vocab", "build", "--in", src, "--out", "p.egvp", "--top", "5"]);
    assert_eq!(v["result"]["vocab_size"], 1000);
    assert_eq!(v["result"]["top_groups"].as_array().unwrap().len(), 5);
    assert!(dir.path().join("p.egvp").exists());
}

#[test]
fn hash_plan_then_stats() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    std::fs::write(p.join("hash.json"), r#"{"orders": [2, 3], "K": 2, "global_seed": 7, "budget": 4000}"#).unwrap();
    let toks: Vec<String> = (0..500).map(|i| ((i * 37 + i / 7) % 97).to_string()).collect();
    std::fs::write(p.join("toks.txt"), toks.join(" ")).unwrap();
    ok_json(p, &["hash", "plan", "--config", "hash.json", "--tokens", "toks.txt", "--out", "plan.json"]);
    let saved = read_json(p.join("plan.json"));
    assert_eq!(saved["command"], "hash plan");
    let fresh = ok_json(p, &["hash", "stats", "--config", "hash.json", "--tokens", "toks.txt"]);
    let reused = ok_json(p, &["hash", "stats", "--config", "hash.json", "--tokens", "toks.txt", "--plan", "plan.json"]);
    assert_eq!(fresh["result"], reused["result"]);
    let rate = fresh["result"]["collision_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn zero_tables_give_zero_output() {
    let dir = layer_fixture();
    let p = dir.path();
    ok_json(p, &["layer", "init", "--config", "cfg.json", "--weights", "w.eglw", "--tables", "t.egtb", "--zero-tables"]);
    let v = ok_json(
        p,
        &[
            "layer", "forward", "--config", "cfg.json", "--weights", "w.eglw", "--tables", "t.egtb", "--tokens", "toks.txt",
            "--hidden", "h.egts", "--out", "y.egts", "--gates", "g.egts",
        ],
    );
    assert_eq!(v["result"]["max_abs_output"], 0.0);
    assert_eq!(v["result"]["branches"], 2);
    assert!(p.join("y.egts").exists() && p.join("g.egts").exists());
}

#[test]
fn backward_writes_gradients() {
    let dir = layer_fixture();
    let p = dir.path();
    ok_json(p, &["layer", "init", "--config", "cfg.json", "--weights", "w.eglw", "--tables", "t.egtb"]);
    ok_json(
        p,
        &[
            "layer", "backward", "--config", "cfg.json", "--weights", "w.eglw", "--tables", "t.egtb", "--tokens", "toks.txt",
            "--hidden", "h.egts", "--depth", "3", "--grad", "dy.egts", "--out-dir", "grads",
        ],
    );
    for f in ["d_hidden.egts", "grad_e.egts", "grad_weights.eglw"] {
        assert!(p.join("grads").join(f).exists(), "{f}");
    }
}

#[test]
fn overlap_bench_has_no_penalty_with_slack() {
    let dir = layer_fixture();
    let p = dir.path();
    ok_json(p, &["layer", "init", "--config", "cfg.json", "--weights", "w.eglw", "--tables", "t.egtb"]);
    let v = ok_json(p, &["store", "bench-overlap", "--config", "cfg.json", "--tables", "t.egtb", "--tokens", "toks.txt"]);
    assert_eq!(v["result"]["throughput_penalty"], 0.0);
}

#[test]
fn bad_config_is_a_json_diagnostic() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    // d_mem is not a multiple of orders x K
    std::fs::write(p.join("bad.json"), LAYER_CFG.replace("\"d_mem\": 8", "\"d_mem\": 6")).unwrap();
    let out = engram(p, &["layer", "init", "--config", "bad.json", "--weights", "w.eglw", "--tables", "t.egtb"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(!p.join("w.eglw").exists());
}

#[test]
fn analysis_commands() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_tensor(p.join("a.egts"), &to_f32_tensor(&wave((3, 24, 6), 0.0))).unwrap();
    let head = Array2::from_shape_fn((6, 11), |(i, j)| ((i * 11 + j) as f64 * 0.21).cos());
    write_tensor(p.join("head.egts"), &to_f32_tensor(&head)).unwrap();
    let last = wave((3, 24, 6), 0.0).index_axis(ndarray::Axis(0), 2).dot(&head);
    write_tensor(p.join("final.egts"), &to_f32_tensor(&last)).unwrap();
    write_tensor(p.join("alpha.egts"), &to_f32_tensor(&wave((2, 2, 24), 0.5).mapv(|x| 0.5 + 0.4 * x))).unwrap();

    ok_json(p, &["analyze", "cka", "--a", "a.egts", "--out", "cka.json"]);
    let cka = read_json(p.join("cka.json"));
    let values = cka["result"]["values"].as_array().unwrap();
    assert_eq!(values.len(), 3);
    for (i, row) in values.iter().enumerate() {
        assert!((row[i].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }

    let align = ok_json(p, &["analyze", "align", "--similarity", "cka.json", "--k", "2"]);
    assert_eq!(align["result"]["alignment"].as_array().unwrap().len(), 3);

    let lens = ok_json(p, &["analyze", "logitlens", "--hidden", "a.egts", "--lm-head", "head.egts", "--final-logits", "final.egts"]);
    let kl = lens["result"]["layers"][2]["mean_kl"].as_f64().unwrap();
    assert!(kl.abs() < 1e-9);

    let gates = ok_json(p, &["analyze", "gates", "--alpha", "alpha.egts", "--select", "1", "--layer-ids", "2,15"]);
    let cols = gates["result"]["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[1]["layer"], 15);
    assert_eq!(gates["result"]["records"].as_array().unwrap().len(), 24);
}

#[test]
fn toy_training_runs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let args = ["--deterministic", "layer", "train-toy", "--steps", "20"];
    let a = ok_json(dir.path(), &args);
    let b = ok_json(dir.path(), &args);
    assert_eq!(a["result"], b["result"]);
    assert_eq!(a["threads"], 1);
    let acc = a["result"]["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
