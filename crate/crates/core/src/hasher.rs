//! Suffix N-gram extraction and multi-head hashing.
//!
//! Every N-gram order `n` owns `K` tables of prime size. Head `k` of order `n`
//! hashes the canonical suffix N-gram ending at each position into its table.
//! Indices depend on the token sequence alone, so a [`RetrievalPlan`] can be
//! built before any hidden state exists and used to prefetch rows.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{config_err, EngramError, Result};

/// Multiplier of the per-element mixing step (2^64 divided by the golden ratio).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer applied to `x + GOLDEN_GAMMA`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of head `head` of order `order`, derived from a global seed.
pub fn derive_seed(global_seed: u64, order: usize, head: usize) -> u64 {
    splitmix64(global_seed ^ (((order as u64) << 8) | head as u64))
}

/// Multiplicative-XOR hash of a canonical N-gram into `[0, table_size)`.
///
/// Ids are offset by one so a zero id still perturbs the state.
#[inline]
pub fn hash_index(gram: &[u32], seed: u64, table_size: u64) -> u64 {
    let mut z = seed;
    for &c in gram {
        z = (z ^ (c as u64 + 1)).wrapping_mul(GOLDEN_GAMMA);
        z ^= z >> 32;
    }
    z % table_size
}

/// The `n` canonical ids ending at `t`, left-padded with `sentinel`.
pub fn suffix_ngram(ids: &[u32], t: usize, n: usize, sentinel: u32) -> Result<Vec<u32>> {
    if n < 2 {
        return config_err(format!("N-gram order must be at least 2, got {n}"));
    }
    if t >= ids.len() {
        return Err(EngramError::OutOfRange {
            index: t as u64,
            len: ids.len() as u64,
        });
    }
    let mut gram = vec![sentinel; n];
    fill_suffix(ids, t, sentinel, &mut gram);
    Ok(gram)
}

#[inline]
fn fill_suffix(ids: &[u32], t: usize, sentinel: u32, gram: &mut [u32]) {
    let n = gram.len();
    for (j, slot) in gram.iter_mut().enumerate() {
        // gram[j] holds position t - (n - 1 - j)
        let back = n - 1 - j;
        *slot = if back > t { sentinel } else { ids[t - back] };
    }
}

/// Identity of one hashed table within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TableKey {
    pub order: usize,
    pub head: usize,
}

/// Validated N-gram hashing configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramConfig {
    orders: Vec<usize>,
    heads: usize,
    table_sizes: Vec<u64>,
    seeds: Vec<u64>,
}

impl NGramConfig {
    /// Seeds are derived from `global_seed`. `table_sizes` is in slot order
    /// (order ascending, then head ascending).
    pub fn new(orders: Vec<usize>, heads: usize, global_seed: u64, table_sizes: Vec<u64>) -> Result<Self> {
        let seeds = orders
            .iter()
            .flat_map(|&n| (0..heads).map(move |k| derive_seed(global_seed, n, k)))
            .collect();
        Self::with_seeds(orders, heads, seeds, table_sizes)
    }

    pub fn with_seeds(orders: Vec<usize>, heads: usize, seeds: Vec<u64>, table_sizes: Vec<u64>) -> Result<Self> {
        if orders.is_empty() {
            return config_err("at least one N-gram order is required");
        }
        if orders.iter().any(|&n| n < 2) {
            return config_err("N-gram orders must be at least 2");
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("N-gram orders must be strictly ascending");
        }
        if heads == 0 {
            return config_err("at least one hash head is required");
        }
        let tables = orders.len() * heads;
        if table_sizes.len() != tables || seeds.len() != tables {
            return config_err(format!(
                "expected {tables} table sizes and seeds, got {} and {}",
                table_sizes.len(),
                seeds.len()
            ));
        }
        if let Some(m) = table_sizes.iter().find(|&&m| !is_prime(m)) {
            return config_err(format!("table size {m} is not prime"));
        }
        let distinct: HashSet<_> = seeds.iter().collect();
        if distinct.len() != seeds.len() {
            return config_err("hash seeds must be pairwise distinct");
        }
        Ok(Self {
            orders,
            heads,
            table_sizes,
            seeds,
        })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn max_order(&self) -> usize {
        *self.orders.last().expect("validated non-empty")
    }

    pub fn table_count(&self) -> usize {
        self.table_sizes.len()
    }

    pub fn table_sizes(&self) -> &[u64] {
        &self.table_sizes
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn table_of(&self, slot: usize) -> TableKey {
        TableKey {
            order: self.orders[slot / self.heads],
            head: slot % self.heads,
        }
    }

    pub fn slot_of(&self, key: TableKey) -> Option<usize> {
        let oi = self.orders.iter().position(|&n| n == key.order)?;
        (key.head < self.heads).then_some(oi * self.heads + key.head)
    }

    pub fn table_keys(&self) -> Vec<TableKey> {
        (0..self.table_count()).map(|s| self.table_of(s)).collect()
    }
}

/// Per-position table indices for one sequence, shape `[T, tables]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    positions: usize,
    table_of: Vec<TableKey>,
    table_sizes: Vec<u64>,
    indices: Vec<u64>,
}

impl RetrievalPlan {
    /// Assembles a plan from raw parts, checking every index against its table.
    pub fn from_parts(positions: usize, table_of: Vec<TableKey>, table_sizes: Vec<u64>, indices: Vec<u64>) -> Result<Self> {
        if table_of.len() != table_sizes.len() || indices.len() != positions * table_sizes.len() {
            return Err(EngramError::Shape("retrieval plan parts disagree".into()));
        }
        let slots = table_sizes.len();
        for (i, &z) in indices.iter().enumerate() {
            let m = table_sizes[i % slots];
            if z >= m {
                return Err(EngramError::OutOfRange { index: z, len: m });
            }
        }
        Ok(Self {
            positions,
            table_of,
            table_sizes,
            indices,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn slots(&self) -> usize {
        self.table_sizes.len()
    }

    pub fn table_of(&self) -> &[TableKey] {
        &self.table_of
    }

    pub fn table_sizes(&self) -> &[u64] {
        &self.table_sizes
    }

    pub fn row(&self, t: usize) -> &[u64] {
        let s = self.slots();
        &self.indices[t * s..(t + 1) * s]
    }

    #[inline]
    pub fn index(&self, t: usize, slot: usize) -> u64 {
        self.indices[t * self.slots() + slot]
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    /// Row indices of one table across all positions.
    pub fn column(&self, slot: usize) -> impl Iterator<Item = u64> + '_ {
        (0..self.positions).map(move |t| self.index(t, slot))
    }
}

fn plan_row(ids: &[u32], t: usize, cfg: &NGramConfig, sentinel: u32, gram: &mut [u32], out: &mut [u64]) {
    let k = cfg.heads;
    for (oi, &n) in cfg.orders.iter().enumerate() {
        let g = &mut gram[..n];
        fill_suffix(ids, t, sentinel, g);
        for head in 0..k {
            let slot = oi * k + head;
            out[slot] = hash_index(g, cfg.seeds[slot], cfg.table_sizes[slot]);
        }
    }
}

/// Computes `z[t][(n,k)] = hash(suffix_ngram(t, n))` for every position and table.
pub fn plan_retrieval(canonical_ids: &[u32], cfg: &NGramConfig, sentinel: u32) -> RetrievalPlan {
    let slots = cfg.table_count();
    let mut indices = vec![0u64; canonical_ids.len() * slots];
    let mut gram = vec![0u32; cfg.max_order()];
    for (t, out) in indices.chunks_mut(slots.max(1)).enumerate() {
        plan_row(canonical_ids, t, cfg, sentinel, &mut gram, out);
    }
    RetrievalPlan {
        positions: canonical_ids.len(),
        table_of: cfg.table_keys(),
        table_sizes: cfg.table_sizes.clone(),
        indices,
    }
}

/// Parallel [`plan_retrieval`]; the result is bitwise identical.
pub fn plan_retrieval_par(canonical_ids: &[u32], cfg: &NGramConfig, sentinel: u32) -> RetrievalPlan {
    let slots = cfg.table_count();
    let mut indices = vec![0u64; canonical_ids.len() * slots];
    indices
        .par_chunks_mut(slots.max(1))
        .enumerate()
        .for_each_init(
            || vec![0u32; cfg.max_order()],
            |gram, (t, out)| plan_row(canonical_ids, t, cfg, sentinel, gram, out),
        );
    RetrievalPlan {
        positions: canonical_ids.len(),
        table_of: cfg.table_keys(),
        table_sizes: cfg.table_sizes.clone(),
        indices,
    }
}

/// Deterministic Miller-Rabin, exact for all `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let pow = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        b %= n;
        while e > 0 {
            if e & 1 == 1 {
                r = mul(r, b);
            }
            b = mul(b, b);
            e >>= 1;
        }
        r
    };
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for a in BASES {
        let mut x = pow(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest prime not exceeding `n`, if any.
pub fn largest_prime_at_most(n: u64) -> Option<u64> {
    (2..=n).rev().find(|&p| is_prime(p))
}

/// Table sizes chosen from a slot budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableSizes {
    pub sizes: Vec<u64>,
    pub realized_total: u64,
}

/// Splits `budget` equally over `tables` tables, rounding each share down to a prime.
pub fn choose_table_sizes(budget: u64, tables: usize) -> Result<TableSizes> {
    if tables == 0 {
        return config_err("no tables to size");
    }
    let share = budget / tables as u64;
    let Some(m) = largest_prime_at_most(share) else {
        return config_err(format!(
            "budget {budget} too small for {tables} tables (share {share} holds no prime)"
        ));
    };
    Ok(TableSizes {
        sizes: vec![m; tables],
        realized_total: m * tables as u64,
    })
}

/// How a configured slot count is spread over the tables of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// The budget is the total across all tables of a layer.
    #[default]
    PerLayer,
    /// Every table gets the full budget.
    PerTable,
}

/// Slot budget with its interpretation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotBudget {
    pub slots: u64,
    #[serde(default)]
    pub mode: BudgetMode,
}

impl SlotBudget {
    pub fn table_sizes(&self, tables: usize) -> Result<TableSizes> {
        match self.mode {
            BudgetMode::PerLayer => choose_table_sizes(self.slots, tables),
            BudgetMode::PerTable => choose_table_sizes(self.slots.saturating_mul(tables as u64), tables),
        }
    }
}

/// JSON form of a hashing configuration: `{orders, K, global_seed, budget}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashConfigSpec {
    pub orders: Vec<usize>,
    #[serde(rename = "K")]
    pub heads: usize,
    pub global_seed: u64,
    pub budget: u64,
    #[serde(default)]
    pub budget_mode: BudgetMode,
    /// Explicit sizes override the budget when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_sizes: Option<Vec<u64>>,
}

impl HashConfigSpec {
    pub fn build(&self) -> Result<NGramConfig> {
        let tables = self.orders.len() * self.heads;
        let sizes = match &self.table_sizes {
            Some(s) => s.clone(),
            None => {
                SlotBudget {
                    slots: self.budget,
                    mode: self.budget_mode,
                }
                .table_sizes(tables)?
                .sizes
            }
        };
        NGramConfig::new(self.orders.clone(), self.heads, self.global_seed, sizes)
    }
}

/// Chi-squared goodness of fit of `indices` against the uniform distribution on `[0, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformityTest {
    pub chi2: f64,
    pub dof: f64,
    pub p_value: f64,
}

pub fn chi_squared_uniformity(indices: impl IntoIterator<Item = u64>, m: u64) -> UniformityTest {
    let mut counts = vec![0u64; m as usize];
    let mut total = 0u64;
    for z in indices {
        counts[z as usize] += 1;
        total += 1;
    }
    chi_squared_from_counts(&counts, total)
}

fn chi_squared_from_counts(counts: &[u64], total: u64) -> UniformityTest {
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = (counts.len() - 1) as f64;
    let p_value = if dof > 0.0 && expected > 0.0 {
        ChiSquared::new(dof).map(|d| d.sf(chi2)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    UniformityTest { chi2, dof, p_value }
}

/// Occupancy and collision summary of a plan, as emitted by `hash stats`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HashStats {
    /// Mean over tables of the fraction of distinct N-grams that share a row
    /// with another distinct N-gram.
    pub collision_rate: f64,
    /// Pooled chi-squared statistic of the per-table row histograms.
    pub chi2: f64,
    pub chi2_dof: f64,
    pub chi2_p_value: f64,
    /// Fraction of rows touched, per table.
    pub per_table_load: Vec<f64>,
    pub distinct_grams: Vec<usize>,
}

/// Summarises how the N-grams of `canonical_ids` land in the tables of `plan`.
pub fn hash_stats(canonical_ids: &[u32], plan: &RetrievalPlan, sentinel: u32) -> Result<HashStats> {
    if plan.positions() != canonical_ids.len() {
        return Err(EngramError::PlanMismatch(format!(
            "plan covers {} positions, sequence has {}",
            plan.positions(),
            canonical_ids.len()
        )));
    }
    let mut collision = Vec::new();
    let mut load = Vec::new();
    let mut distinct = Vec::new();
    let mut chi2 = 0.0;
    let mut dof = 0.0;
    for slot in 0..plan.slots() {
        let n = plan.table_of()[slot].order;
        let m = plan.table_sizes()[slot];
        let mut row_of_gram: HashMap<Vec<u32>, u64> = HashMap::new();
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for t in 0..plan.positions() {
            let gram = suffix_ngram(canonical_ids, t, n, sentinel)?;
            let z = plan.index(t, slot);
            row_of_gram.insert(gram, z);
            *counts.entry(z).or_default() += 1;
        }
        let grams = row_of_gram.len();
        let mut per_row: HashMap<u64, usize> = HashMap::new();
        for &z in row_of_gram.values() {
            *per_row.entry(z).or_default() += 1;
        }
        let shared: usize = per_row.values().filter(|&&c| c > 1).sum();
        collision.push(if grams == 0 { 0.0 } else { shared as f64 / grams as f64 });
        load.push(per_row.len() as f64 / m as f64);
        distinct.push(grams);
        let total = plan.positions() as f64;
        if total > 0.0 {
            let e = total / m as f64;
            let occupied: f64 = counts.values().map(|&o| (o as f64 - e).powi(2) / e).sum();
            chi2 += occupied + (m as usize - counts.len()) as f64 * e;
            dof += (m - 1) as f64;
        }
    }
    let chi2_p_value = if dof > 0.0 {
        ChiSquared::new(dof).map(|d| d.sf(chi2)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let tables = collision.len().max(1) as f64;
    Ok(HashStats {
        collision_rate: collision.iter().sum::<f64>() / tables,
        chi2,
        chi2_dof: dof,
        chi2_p_value,
        per_table_load: load,
        distinct_grams: distinct,
    })
}
