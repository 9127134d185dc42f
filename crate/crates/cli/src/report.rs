//! Report envelope written by every subcommand.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Run metadata embedded in each report.
pub struct RunInfo {
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Wraps `result` with run metadata and writes it to `out` or stdout.
pub fn emit(info: &RunInfo, config: Value, result: impl Serialize, out: Option<&Path>) -> Result<()> {
    let doc = json!({
        "tool": "engram",
        "version": VERSION,
        "command": info.command,
        "seed": info.seed,
        "threads": info.threads,
        "deterministic": info.deterministic,
        "config_hash": config_hash(&config),
        "config": config,
        "result": result,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}
