//! The JSON run configuration shared by the layer and store subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use engram_core::hasher::{NGramConfig, SlotBudget};
use engram_core::layer::{InitConfig, LayerDims};
use engram_core::store::{SparseAdamConfig, TierConfig};
use engram_core::EngramError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngramConfig {
    /// Canonical projection file (`EGVP`). Without it tokens are used as-is.
    #[serde(default)]
    pub projection: Option<PathBuf>,
    /// Raw vocabulary size; required when no projection is given.
    #[serde(default)]
    pub vocab_size: Option<u32>,
    pub orders: Vec<usize>,
    #[serde(rename = "K")]
    pub heads: usize,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default)]
    pub slot_budget: Option<SlotBudget>,
    #[serde(default)]
    pub table_sizes: Option<Vec<u64>>,
    pub hidden: usize,
    pub d_mem: usize,
    #[serde(default = "one")]
    pub branches: usize,
    pub placements: Vec<usize>,
    #[serde(default)]
    pub optimizer: SparseAdamConfig,
    #[serde(default)]
    pub tier: TierConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "one")]
    pub shards: usize,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    EngramError::Config(msg.into()).into()
}

fn one() -> usize {
    1
}

impl EngramConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn table_count(&self) -> usize {
        self.orders.len() * self.heads
    }

    pub fn d_sub(&self) -> usize {
        self.d_mem / self.table_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() || self.heads == 0 {
            return Err(invalid("config needs at least one N-gram order and one head"));
        }
        if self.d_mem == 0 || !self.d_mem.is_multiple_of(self.table_count()) {
            return Err(invalid(format!(
                "d_mem = {} must be a positive multiple of orders x K = {}",
                self.d_mem,
                self.table_count()
            )));
        }
        if self.placements.is_empty() {
            return Err(invalid("config needs at least one layer placement"));
        }
        if self.placements.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("layer placements must be strictly increasing: {:?}", self.placements)));
        }
        if self.slot_budget.is_none() && self.table_sizes.is_none() {
            return Err(invalid("config needs either slot_budget or table_sizes"));
        }
        if self.projection.is_none() && self.vocab_size.is_none() {
            return Err(invalid("config needs either a projection file or vocab_size"));
        }
        if self.shards == 0 {
            return Err(invalid("shards must be positive"));
        }
        self.optimizer.validate()?;
        self.tier.validate()?;
        self.ngram()?;
        self.dims().validate()?;
        Ok(())
    }

    pub fn ngram(&self) -> Result<NGramConfig> {
        let sizes = match (&self.table_sizes, &self.slot_budget) {
            (Some(s), _) => s.clone(),
            (None, Some(b)) => b.table_sizes(self.table_count())?.sizes,
            (None, None) => bail!("config needs either slot_budget or table_sizes"),
        };
        Ok(NGramConfig::new(self.orders.clone(), self.heads, self.global_seed, sizes)?)
    }

    pub fn dims(&self) -> LayerDims {
        let max_order = self.orders.iter().copied().max().unwrap_or(0);
        LayerDims::new(self.hidden, self.d_mem, self.branches, max_order)
    }
}
