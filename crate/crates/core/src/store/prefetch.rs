//! Prefetch-and-overlap scheduling.
//!
//! Retrieval plans depend only on tokens, so every Engram layer's rows can be
//! requested at the start of a forward pass. The fetch for a layer placed at
//! depth `l` overlaps with the compute of layers `0..l`; the layer stalls only
//! when its fetch outlasts that window. [`prefetch_execute`] runs this on a
//! virtual clock. [`run_pipelined`] is the wall-clock counterpart: a producer
//! thread gathers rows into a bounded queue ahead of a consumer.

use std::collections::HashSet;
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cache::{AdmissionPolicy, HotTier, RowKey};
use super::{Element, ShardedStore};
use crate::error::{config_err, EngramError, Result};
use crate::hasher::RetrievalPlan;

/// Affine cost of moving rows over the cold link, in simulated microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub fixed_us: f64,
    pub per_row_us: f64,
}

impl Default for LatencyModel {
    /// Roughly a PCIe 4.0 x16 link moving 2.5 KiB rows: ~10 us launch
    /// overhead and ~0.1 us per row at ~25 GB/s effective bandwidth.
    fn default() -> Self {
        Self {
            fixed_us: 10.0,
            per_row_us: 0.1,
        }
    }
}

impl LatencyModel {
    pub fn cost(&self, rows: u64) -> f64 {
        if rows == 0 {
            0.0
        } else {
            self.fixed_us + self.per_row_us * rows as f64
        }
    }
}

/// Hot-tier and link configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub hot_capacity_rows: usize,
    pub latency: LatencyModel,
    pub policy: AdmissionPolicy,
    /// Accesses per generation of the frequency sketch.
    pub frequency_window: u64,
    /// Bytes per row element on the cold link.
    pub element_bytes: u64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            hot_capacity_rows: 0,
            latency: LatencyModel::default(),
            policy: AdmissionPolicy::Frequency,
            frequency_window: 1 << 20,
            element_bytes: 4,
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.latency;
        if !(l.fixed_us >= 0.0 && l.per_row_us >= 0.0 && l.fixed_us.is_finite() && l.per_row_us.is_finite()) {
            return config_err("latency model coefficients must be finite and non-negative");
        }
        Ok(())
    }

    pub fn new_tier(&self) -> HotTier {
        HotTier::new(self.hot_capacity_rows, self.policy, self.frequency_window)
    }
}

/// Per-layer compute durations of one forward pass, in simulated microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeTrace {
    pub layer_us: Vec<f64>,
}

impl ComputeTrace {
    pub fn uniform(layers: usize, per_layer_us: f64) -> Self {
        Self {
            layer_us: vec![per_layer_us; layers],
        }
    }

    /// Compute time elapsed before layer `depth` starts.
    pub fn window_before(&self, depth: usize) -> f64 {
        self.layer_us[..depth.min(self.layer_us.len())].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.layer_us.iter().sum()
    }
}

/// An Engram layer and the backbone depth it sits at.
#[derive(Debug, Clone, Copy)]
pub struct PlacedLayer<'a, F> {
    pub depth: usize,
    pub store: &'a ShardedStore<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStepReport {
    pub depth: usize,
    pub compute_window_us: f64,
    pub fetch_us: f64,
    pub stall_us: f64,
    pub rows_fetched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub layers: Vec<LayerStepReport>,
    pub stall_us: f64,
    pub bytes_fetched: u64,
}

/// Outcome of a simulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub stall_time_us: f64,
    pub total_compute_us: f64,
    pub bytes_fetched: u64,
    /// Fraction of row lookups served by the hot tier.
    pub hot_hit_rate: f64,
    /// `stall_time / total_compute`.
    pub throughput_penalty: f64,
    pub steps: Vec<StepReport>,
}

/// Simulates `steps` forward passes. `steps[s][i]` is the plan of
/// `layers[i]` for step `s`. The hot tier persists across steps.
pub fn prefetch_execute<F: Element>(
    layers: &[PlacedLayer<'_, F>],
    steps: &[Vec<RetrievalPlan>],
    tiers: &TierConfig,
    trace: &ComputeTrace,
) -> Result<OverlapReport> {
    tiers.validate()?;
    if layers.windows(2).any(|w| w[0].depth >= w[1].depth) {
        return config_err("Engram layer depths must be strictly increasing");
    }
    if let Some(l) = layers.iter().find(|l| l.depth >= trace.layer_us.len()) {
        return config_err(format!(
            "layer depth {} outside compute trace of {} layers",
            l.depth,
            trace.layer_us.len()
        ));
    }
    if layers.len() > 1 << 8 {
        return config_err("at most 256 Engram layers are supported");
    }
    if trace.layer_us.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return config_err("compute trace entries must be finite and non-negative");
    }
    let mut tier = tiers.new_tier();
    let mut reports = Vec::with_capacity(steps.len());
    let (mut lookups, mut hits) = (0u64, 0u64);
    for plans in steps {
        if plans.len() != layers.len() {
            return Err(EngramError::PlanMismatch(format!(
                "step has {} plans for {} layers",
                plans.len(),
                layers.len()
            )));
        }
        let mut step = StepReport {
            layers: Vec::with_capacity(layers.len()),
            stall_us: 0.0,
            bytes_fetched: 0,
        };
        for (li, (layer, plan)) in layers.iter().zip(plans).enumerate() {
            layer.store.check_plan(plan)?;
            let mut missed: HashSet<RowKey> = HashSet::new();
            for t in 0..plan.positions() {
                for slot in 0..plan.slots() {
                    let key = RowKey::new(li, slot, plan.index(t, slot));
                    lookups += 1;
                    if tier.access(key) {
                        hits += 1;
                    } else {
                        missed.insert(key);
                    }
                }
            }
            let rows = missed.len() as u64;
            let fetch_us = tiers.latency.cost(rows);
            let window = trace.window_before(layer.depth);
            // earlier stalls delay this layer's start, fetch started at t = 0
            let ready = window + step.stall_us;
            let stall = (fetch_us - ready).max(0.0);
            step.stall_us += stall;
            step.bytes_fetched += rows * layer.store.dim() as u64 * tiers.element_bytes;
            step.layers.push(LayerStepReport {
                depth: layer.depth,
                compute_window_us: window,
                fetch_us,
                stall_us: stall,
                rows_fetched: rows,
            });
        }
        reports.push(step);
    }
    let stall: f64 = reports.iter().map(|s| s.stall_us).sum();
    let total_compute = trace.total() * steps.len() as f64;
    Ok(OverlapReport {
        stall_time_us: stall,
        total_compute_us: total_compute,
        bytes_fetched: reports.iter().map(|s| s.bytes_fetched).sum(),
        hot_hit_rate: if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
        throughput_penalty: if total_compute > 0.0 { stall / total_compute } else { 0.0 },
        steps: reports,
    })
}

/// Wall-clock statistics of [`run_pipelined`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineStats {
    pub steps: usize,
    pub wall: Duration,
    /// Time the consumer spent blocked waiting for gathered rows.
    pub consumer_wait: Duration,
}

/// Gathers `plans` on a producer thread, at most `depth` steps ahead of the
/// consumer, and hands each gathered batch to `consume` in order.
pub fn run_pipelined<F, C>(store: &ShardedStore<F>, plans: &[RetrievalPlan], depth: usize, mut consume: C) -> Result<PipelineStats>
where
    F: Element,
    C: FnMut(usize, Array2<F>),
{
    for plan in plans {
        store.check_plan(plan)?;
    }
    let start = Instant::now();
    let mut wait = Duration::ZERO;
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<(usize, Array2<F>)>(depth.max(1));
        scope.spawn(move || {
            for (i, plan) in plans.iter().enumerate() {
                let e = store.gather(plan).expect("plans checked above");
                if tx.send((i, e)).is_err() {
                    break;
                }
            }
        });
        loop {
            let t0 = Instant::now();
            let Ok((i, e)) = rx.recv() else { break };
            wait += t0.elapsed();
            consume(i, e);
        }
    });
    Ok(PipelineStats {
        steps: plans.len(),
        wall: start.elapsed(),
        consumer_wait: wait,
    })
}
