//! Hot-tier cache for frequently retrieved rows.
//!
//! Access frequencies are estimated with a count-min sketch over a sliding
//! window (two generations of `window` accesses each). A missed row is
//! admitted when the tier has room or when its estimate beats the
//! least-frequent resident, which is then evicted.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::hasher::splitmix64;

/// A row of one table of one layer, packed into 64 bits:
/// 8 bits of layer, 16 bits of table slot, 40 bits of row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey(pub u64);

impl RowKey {
    pub fn new(layer: usize, slot: usize, row: u64) -> Self {
        debug_assert!(layer < 1 << 8 && slot < 1 << 16 && row < 1 << 40);
        Self(((layer as u64) << 56) | ((slot as u64) << 40) | row)
    }

    pub fn row(self) -> u64 {
        self.0 & ((1 << 40) - 1)
    }
}

/// Count-min sketch with saturating 32-bit counters.
#[derive(Debug, Clone)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    counters: Vec<u32>,
}

impl CountMinSketch {
    pub fn new(width: usize, depth: usize) -> Self {
        let width = width.max(1);
        let depth = depth.max(1);
        Self {
            width,
            depth,
            counters: vec![0; width * depth],
        }
    }

    #[inline]
    fn cell(&self, key: u64, row: usize) -> usize {
        row * self.width + (splitmix64(key ^ (row as u64).wrapping_mul(0xA076_1D64_78BD_642F)) % self.width as u64) as usize
    }

    pub fn increment(&mut self, key: u64) -> u32 {
        let mut est = u32::MAX;
        for r in 0..self.depth {
            let c = self.cell(key, r);
            self.counters[c] = self.counters[c].saturating_add(1);
            est = est.min(self.counters[c]);
        }
        est
    }

    pub fn estimate(&self, key: u64) -> u32 {
        (0..self.depth)
            .map(|r| self.counters[self.cell(key, r)])
            .min()
            .unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
    }
}

/// How rows enter the hot tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionPolicy {
    /// Frequency-based admission with least-frequent eviction.
    #[default]
    Frequency,
    /// Only preloaded rows are ever resident.
    Static,
}

#[derive(Debug, Clone)]
struct WindowedCounts {
    current: CountMinSketch,
    previous: CountMinSketch,
    window: u64,
    seen: u64,
}

impl WindowedCounts {
    fn estimate(&self, key: u64) -> u64 {
        self.current.estimate(key) as u64 + self.previous.estimate(key) as u64
    }

    // Returns the new estimate and whether the window rotated.
    fn record(&mut self, key: u64) -> (u64, bool) {
        let cur = self.current.increment(key) as u64;
        let est = cur + self.previous.estimate(key) as u64;
        self.seen += 1;
        if self.seen >= self.window {
            std::mem::swap(&mut self.current, &mut self.previous);
            self.current.clear();
            self.seen = 0;
            return (est, true);
        }
        (est, false)
    }
}

/// State of the hot tier.
#[derive(Debug, Clone)]
pub struct HotTier {
    capacity: usize,
    policy: AdmissionPolicy,
    counts: WindowedCounts,
    resident: HashMap<RowKey, u64>,
    by_freq: BTreeSet<(u64, RowKey)>,
    hits: u64,
    misses: u64,
}

impl HotTier {
    /// `window` is the number of accesses per sketch generation.
    pub fn new(capacity: usize, policy: AdmissionPolicy, window: u64) -> Self {
        let width = (capacity.max(64) * 8).next_power_of_two();
        Self {
            capacity,
            policy,
            counts: WindowedCounts {
                current: CountMinSketch::new(width, 4),
                previous: CountMinSketch::new(width, 4),
                window: window.max(1),
                seen: 0,
            },
            resident: HashMap::new(),
            by_freq: BTreeSet::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn contains(&self, key: RowKey) -> bool {
        self.resident.contains_key(&key)
    }

    pub fn resident(&self) -> impl Iterator<Item = RowKey> + '_ {
        self.resident.keys().copied()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Installs rows without counting accesses, up to capacity.
    pub fn preload(&mut self, keys: impl IntoIterator<Item = RowKey>) {
        for key in keys {
            if self.resident.len() >= self.capacity {
                break;
            }
            if self.resident.insert(key, 0).is_none() {
                self.by_freq.insert((0, key));
            }
        }
    }

    fn insert(&mut self, key: RowKey, freq: u64) {
        self.resident.insert(key, freq);
        self.by_freq.insert((freq, key));
    }

    fn refresh_all(&mut self) {
        self.by_freq.clear();
        for (key, f) in self.resident.iter_mut() {
            *f = self.counts.estimate(key.0);
            self.by_freq.insert((*f, *key));
        }
    }

    /// Records one access and returns whether it hit the hot tier.
    pub fn access(&mut self, key: RowKey) -> bool {
        let (est, rotated) = self.counts.record(key.0);
        let hit = if let Some(old) = self.resident.get(&key).copied() {
            self.by_freq.remove(&(old, key));
            self.insert(key, est);
            true
        } else {
            if self.policy == AdmissionPolicy::Frequency && self.capacity > 0 {
                if self.resident.len() < self.capacity {
                    self.insert(key, est);
                } else if let Some(&(min_f, victim)) = self.by_freq.first() {
                    if est > min_f {
                        self.by_freq.remove(&(min_f, victim));
                        self.resident.remove(&victim);
                        self.insert(key, est);
                    }
                }
            }
            false
        };
        if rotated {
            self.refresh_all();
        }
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    /// Processes an access sequence in order, returning the number of hits.
    pub fn admit_evict(&mut self, accessed: &[RowKey]) -> u64 {
        accessed.iter().filter(|&&k| self.access(k)).count() as u64
    }
}

/// Functional form of [`HotTier::admit_evict`].
pub fn cache_admit_evict(mut state: HotTier, accessed: &[RowKey]) -> HotTier {
    state.admit_evict(accessed);
    state
}
