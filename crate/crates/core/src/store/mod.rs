//! Embedding storage for one Engram layer.
//!
//! Each hashed table is split into contiguous row-range shards. Gradients
//! scattered into a shard are staged per row and consumed by the lazy sparse
//! Adam step in [`optim`], which keeps moments only for rows that have
//! received a gradient. [`cache`] and [`prefetch`] model the host-memory
//! offload path: a frequency-admitted hot tier and a virtual-clock overlap
//! simulator.

pub mod cache;
pub mod optim;
pub mod prefetch;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{Array2, ArrayView2};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{EngramError, Result};
use crate::hasher::{RetrievalPlan, TableKey};

pub use cache::{cache_admit_evict, AdmissionPolicy, CountMinSketch, HotTier, RowKey};
pub use optim::{DenseAdam, SparseAdamConfig};
pub use prefetch::{
    prefetch_execute, run_pipelined, ComputeTrace, LatencyModel, OverlapReport, PipelineStats,
    PlacedLayer, TierConfig,
};

/// Scalar type of a table. Implemented for `f32` (storage) and `f64` (exact checks).
pub trait Element: Float + AddAssign + Sum + Send + Sync + Debug + Default + 'static {}

impl Element for f32 {}
impl Element for f64 {}

/// Identity of a table across the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TableId {
    pub key: TableKey,
    pub layer: u32,
}

/// A dense, unsharded `rows x dim` table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F> {
    pub id: TableId,
    pub rows: u64,
    pub dim: usize,
    pub data: Vec<F>,
}

impl<F: Element> EmbeddingTable<F> {
    pub fn zeros(id: TableId, rows: u64, dim: usize) -> Self {
        Self {
            id,
            rows,
            dim,
            data: vec![F::zero(); rows as usize * dim],
        }
    }

    pub fn row(&self, r: u64) -> &[F] {
        let r = r as usize;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RowState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

#[derive(Debug, Clone)]
struct Shard<F> {
    start: u64,
    end: u64,
    data: Vec<F>,
    grads: BTreeMap<u64, Vec<F>>,
    state: HashMap<u64, RowState<F>>,
}

impl<F: Element> Shard<F> {
    fn local(&self, row: u64, dim: usize) -> std::ops::Range<usize> {
        let r = (row - self.start) as usize;
        r * dim..(r + 1) * dim
    }
}

#[derive(Debug, Clone)]
struct ShardedTable<F> {
    rows: u64,
    rows_per_shard: u64,
    shards: Vec<Shard<F>>,
}

impl<F: Element> ShardedTable<F> {
    fn from_dense(data: Vec<F>, rows: u64, dim: usize, shard_count: usize) -> Self {
        let shard_count = shard_count.max(1) as u64;
        let rows_per_shard = rows.div_ceil(shard_count).max(1);
        let mut shards = Vec::with_capacity(shard_count as usize);
        for s in 0..shard_count {
            let start = (s * rows_per_shard).min(rows);
            let end = ((s + 1) * rows_per_shard).min(rows);
            shards.push(Shard {
                start,
                end,
                data: data[start as usize * dim..end as usize * dim].to_vec(),
                grads: BTreeMap::new(),
                state: HashMap::new(),
            });
        }
        Self {
            rows,
            rows_per_shard,
            shards,
        }
    }

    #[inline]
    fn shard_of(&self, row: u64) -> usize {
        (row / self.rows_per_shard) as usize
    }

    fn row(&self, row: u64, dim: usize) -> &[F] {
        let shard = &self.shards[self.shard_of(row)];
        &shard.data[shard.local(row, dim)]
    }
}

/// The tables of one Engram layer, sharded by contiguous row ranges.
#[derive(Debug, Clone)]
pub struct ShardedStore<F> {
    layer: u32,
    keys: Vec<TableKey>,
    dim: usize,
    tables: Vec<ShardedTable<F>>,
}

impl<F: Element> ShardedStore<F> {
    /// Builds a store from dense tables given in slot order. All tables must
    /// share the same row width and belong to the same layer.
    pub fn from_tables(tables: Vec<EmbeddingTable<F>>, shard_count: usize) -> Result<Self> {
        let Some(first) = tables.first() else {
            return Err(EngramError::Config("a store needs at least one table".into()));
        };
        let (dim, layer) = (first.dim, first.id.layer);
        if dim == 0 {
            return Err(EngramError::Config("row width must be positive".into()));
        }
        let mut keys = Vec::with_capacity(tables.len());
        let mut sharded = Vec::with_capacity(tables.len());
        for t in tables {
            if t.dim != dim || t.id.layer != layer {
                return Err(EngramError::Config(
                    "tables of one store must share row width and layer".into(),
                ));
            }
            if t.data.len() != t.rows as usize * dim {
                return Err(EngramError::Shape(format!(
                    "table {:?} holds {} values, expected {}",
                    t.id,
                    t.data.len(),
                    t.rows as usize * dim
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(EngramError::Validation(format!("table {:?} has non-finite rows", t.id)));
            }
            keys.push(t.id.key);
            sharded.push(ShardedTable::from_dense(t.data, t.rows, dim, shard_count));
        }
        Ok(Self {
            layer,
            keys,
            dim,
            tables: sharded,
        })
    }

    /// Zero-filled tables.
    pub fn zeros(layer: u32, keys: &[TableKey], sizes: &[u64], dim: usize, shard_count: usize) -> Result<Self> {
        if keys.len() != sizes.len() {
            return Err(EngramError::Shape("one size per table key required".into()));
        }
        let tables = keys
            .iter()
            .zip(sizes)
            .map(|(&key, &rows)| EmbeddingTable::zeros(TableId { key, layer }, rows, dim))
            .collect();
        Self::from_tables(tables, shard_count)
    }

    /// Tables drawn i.i.d. from `N(0, std^2)` with a seeded generator.
    pub fn random_normal(
        layer: u32,
        keys: &[TableKey],
        sizes: &[u64],
        dim: usize,
        std: f64,
        seed: u64,
        shard_count: usize,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| EngramError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = keys
            .iter()
            .zip(sizes)
            .map(|(&key, &rows)| {
                let data = (0..rows as usize * dim)
                    .map(|_| F::from(normal.sample(&mut rng)).unwrap())
                    .collect();
                EmbeddingTable {
                    id: TableId { key, layer },
                    rows,
                    dim,
                    data,
                }
            })
            .collect();
        Self::from_tables(tables, shard_count)
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn keys(&self) -> &[TableKey] {
        &self.keys
    }

    /// Row width `d_sub` of every table.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Width of a gathered memory vector, `tables * d_sub`.
    pub fn mem_dim(&self) -> usize {
        self.dim * self.tables.len()
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn table_sizes(&self) -> Vec<u64> {
        self.tables.iter().map(|t| t.rows).collect()
    }

    pub fn shard_count(&self) -> usize {
        self.tables[0].shards.len()
    }

    /// Shard holding `row` of table `slot`.
    pub fn shard_of(&self, slot: usize, row: u64) -> usize {
        self.tables[slot].shard_of(row)
    }

    /// Row ranges `[start, end)` of the shards of table `slot`.
    pub fn shard_ranges(&self, slot: usize) -> Vec<(u64, u64)> {
        self.tables[slot].shards.iter().map(|s| (s.start, s.end)).collect()
    }

    pub fn row(&self, slot: usize, row: u64) -> &[F] {
        self.tables[slot].row(row, self.dim)
    }

    pub fn set_row(&mut self, slot: usize, row: u64, values: &[F]) -> Result<()> {
        if values.len() != self.dim {
            return Err(EngramError::Shape(format!(
                "row has {} values, expected {}",
                values.len(),
                self.dim
            )));
        }
        let table = &mut self.tables[slot];
        if row >= table.rows {
            return Err(EngramError::OutOfRange { index: row, len: table.rows });
        }
        let s = table.shard_of(row);
        let range = table.shards[s].local(row, self.dim);
        table.shards[s].data[range].copy_from_slice(values);
        Ok(())
    }

    /// Re-partitions into `shard_count` shards, keeping data, staged gradients
    /// and optimizer state.
    pub fn reshard(&self, shard_count: usize) -> Self {
        let dim = self.dim;
        let tables = self
            .tables
            .iter()
            .map(|t| {
                let data: Vec<F> = t.shards.iter().flat_map(|s| s.data.iter().copied()).collect();
                let mut out = ShardedTable::from_dense(data, t.rows, dim, shard_count);
                for shard in &t.shards {
                    for (&row, g) in &shard.grads {
                        let s = out.shard_of(row);
                        out.shards[s].grads.insert(row, g.clone());
                    }
                    for (&row, st) in &shard.state {
                        let s = out.shard_of(row);
                        out.shards[s].state.insert(row, st.clone());
                    }
                }
                out
            })
            .collect();
        Self {
            layer: self.layer,
            keys: self.keys.clone(),
            dim,
            tables,
        }
    }

    /// Dense copies of every table, in slot order.
    pub fn to_tables(&self) -> Vec<EmbeddingTable<F>> {
        self.tables
            .iter()
            .zip(&self.keys)
            .map(|(t, &key)| EmbeddingTable {
                id: TableId { key, layer: self.layer },
                rows: t.rows,
                dim: self.dim,
                data: t.shards.iter().flat_map(|s| s.data.iter().copied()).collect(),
            })
            .collect()
    }

    /// Checks that `plan` was built for exactly these tables.
    pub fn check_plan(&self, plan: &RetrievalPlan) -> Result<()> {
        if plan.table_of() != self.keys.as_slice() {
            return Err(EngramError::PlanMismatch(format!(
                "plan tables {:?} differ from store tables {:?}",
                plan.table_of(),
                self.keys
            )));
        }
        for (slot, (&m, t)) in plan.table_sizes().iter().zip(&self.tables).enumerate() {
            if m != t.rows {
                return Err(EngramError::PlanMismatch(format!(
                    "table {slot}: plan size {m}, store size {}",
                    t.rows
                )));
            }
        }
        Ok(())
    }

    /// `e[t]` is the concatenation over tables (slot order) of the rows named by the plan.
    pub fn gather(&self, plan: &RetrievalPlan) -> Result<Array2<F>> {
        self.check_plan(plan)?;
        let (t_len, d_mem, dim) = (plan.positions(), self.mem_dim(), self.dim);
        let mut out = vec![F::zero(); t_len * d_mem];
        out.par_chunks_mut(d_mem.max(1))
            .enumerate()
            .for_each(|(t, row_out)| {
                for (slot, table) in self.tables.iter().enumerate() {
                    let z = plan.index(t, slot);
                    row_out[slot * dim..(slot + 1) * dim].copy_from_slice(table.row(z, dim));
                }
            });
        Ok(Array2::from_shape_vec((t_len, d_mem), out).expect("shape computed above"))
    }

    /// Adds each `d_sub` block of `grad` into the staged gradient of the row
    /// it was gathered from. Shards accumulate in parallel; within a shard
    /// positions are visited in ascending order, so the result is identical
    /// to sequential accumulation.
    pub fn scatter_add(&mut self, plan: &RetrievalPlan, grad: ArrayView2<'_, F>) -> Result<()> {
        self.check_plan(plan)?;
        if grad.dim() != (plan.positions(), self.mem_dim()) {
            return Err(EngramError::Shape(format!(
                "gradient shape {:?}, expected {:?}",
                grad.dim(),
                (plan.positions(), self.mem_dim())
            )));
        }
        let dim = self.dim;
        self.tables
            .par_iter_mut()
            .enumerate()
            .for_each(|(slot, table)| {
                table.shards.par_iter_mut().for_each(|shard| {
                    for t in 0..plan.positions() {
                        let z = plan.index(t, slot);
                        if z < shard.start || z >= shard.end {
                            continue;
                        }
                        let acc = shard.grads.entry(z).or_insert_with(|| vec![F::zero(); dim]);
                        let block = grad.row(t);
                        for (a, &g) in acc.iter_mut().zip(block.iter().skip(slot * dim).take(dim)) {
                            *a += g;
                        }
                    }
                });
            });
        Ok(())
    }

    /// Staged gradient of one row, if it has received any.
    pub fn staged_grad(&self, slot: usize, row: u64) -> Option<&[F]> {
        let table = &self.tables[slot];
        table.shards[table.shard_of(row)].grads.get(&row).map(Vec::as_slice)
    }

    /// Rows of table `slot` with a staged gradient, ascending.
    pub fn touched_rows(&self, slot: usize) -> Vec<u64> {
        self.tables[slot]
            .shards
            .iter()
            .flat_map(|s| s.grads.keys().copied())
            .collect()
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tables {
            for s in &mut t.shards {
                s.grads.clear();
            }
        }
    }

    /// Number of rows of table `slot` that carry optimizer state.
    pub fn state_rows(&self, slot: usize) -> usize {
        self.tables[slot].shards.iter().map(|s| s.state.len()).sum()
    }

    /// Per-row Adam step count, zero for rows never updated.
    pub fn row_step(&self, slot: usize, row: u64) -> u64 {
        let table = &self.tables[slot];
        table.shards[table.shard_of(row)]
            .state
            .get(&row)
            .map_or(0, |s| s.step)
    }

    /// Applies one lazy Adam update to every row with a staged gradient and
    /// clears the staging area. Returns the number of rows updated.
    ///
    /// Non-finite gradients are rejected before any row changes.
    pub fn sparse_adam_step(&mut self, cfg: &SparseAdamConfig) -> Result<usize> {
        cfg.validate()?;
        let bad = self.tables.iter().any(|t| {
            t.shards
                .iter()
                .any(|s| s.grads.values().any(|g| g.iter().any(|x| !x.is_finite())))
        });
        if bad {
            return Err(EngramError::Validation("non-finite staged gradient".into()));
        }
        let dim = self.dim;
        let updated = self
            .tables
            .par_iter_mut()
            .map(|table| {
                table
                    .shards
                    .par_iter_mut()
                    .map(|shard| {
                        let grads = std::mem::take(&mut shard.grads);
                        for (row, g) in &grads {
                            let range = shard.local(*row, dim);
                            let state = shard.state.entry(*row).or_insert_with(|| RowState {
                                m: vec![F::zero(); dim],
                                v: vec![F::zero(); dim],
                                step: 0,
                            });
                            optim::adam_row_update(cfg, &mut shard.data[range], g, state);
                        }
                        grads.len()
                    })
                    .sum::<usize>()
            })
            .sum();
        Ok(updated)
    }
}
