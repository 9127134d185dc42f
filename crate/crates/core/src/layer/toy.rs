//! Toy memorization task: recover a class from a planted bigram.
//!
//! For every second token `b` and class `c` there is one planted first token
//! `a`, so `b` alone carries no information about the class and the only way
//! to beat chance is to look the bigram `(a, b)` up in memory. Sequences are
//! back-to-back planted pairs and the loss sits on each pair's second token.
//!
//! The backbone is a frozen random embedding per branch. Only the Engram
//! layer (tables via sparse Adam, dense weights via Adam) and a linear
//! classification head are trained.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{engram_layer_backward, forward_memory_with, EngramLayerWeights, InitConfig, LayerDims};
use crate::error::{config_err, Result};
use crate::hasher::{choose_table_sizes, plan_retrieval, NGramConfig, RetrievalPlan};
use crate::store::{DenseAdam, ShardedStore, SparseAdamConfig};

/// Settings of the toy run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab: usize,
    pub classes: usize,
    pub hidden: usize,
    pub branches: usize,
    pub heads: usize,
    pub d_sub: usize,
    /// Rows per table before rounding down to a prime.
    pub slots_per_table: u64,
    /// Planted pairs per sequence; sequences have twice as many tokens.
    pub pairs_per_sequence: usize,
    pub batch: usize,
    pub steps: usize,
    /// Base rate; tables use `table_lr_multiplier` times this.
    pub lr: f64,
    pub table_lr_multiplier: f64,
    pub table_std: f64,
    /// Forces every gate to this value when set.
    pub gate_override: Option<f64>,
    /// Loss is recorded every this many steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 100,
            classes: 10,
            hidden: 32,
            branches: 2,
            heads: 2,
            d_sub: 16,
            slots_per_table: 4100,
            pairs_per_sequence: 8,
            batch: 32,
            steps: 2000,
            lr: 4e-4,
            table_lr_multiplier: 5.0,
            table_std: 0.006,
            gate_override: None,
            log_every: 50,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn patterns(&self) -> usize {
        self.vocab * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.classes < 2 || self.classes > self.vocab {
            return config_err("toy task needs 2 <= classes <= vocab");
        }
        if self.hidden == 0 || self.branches == 0 || self.heads == 0 || self.d_sub == 0 {
            return config_err("toy layer sizes must be positive");
        }
        if self.pairs_per_sequence == 0 || self.batch == 0 || self.log_every == 0 {
            return config_err("pairs, batch and log interval must be positive");
        }
        if !(self.lr > 0.0) || !(self.table_lr_multiplier > 0.0) {
            return config_err("learning rates must be positive");
        }
        Ok(())
    }
}

/// One planted pattern: tokens `(first, second)` map to `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub first: u32,
    pub second: u32,
    pub class: u32,
}

/// Builds `vocab * classes` patterns where each second token appears once per class.
pub fn planted_patterns(vocab: usize, classes: usize, rng: &mut impl Rng) -> Vec<Pattern> {
    let mut out = Vec::with_capacity(vocab * classes);
    let mut firsts: Vec<u32> = (0..vocab as u32).collect();
    for second in 0..vocab as u32 {
        firsts.shuffle(rng);
        for class in 0..classes as u32 {
            out.push(Pattern {
                first: firsts[class as usize],
                second,
                class,
            });
        }
    }
    out
}

/// Loss recorded at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Result of [`train_toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub patterns: usize,
    pub table_sizes: Vec<u64>,
    pub loss_curve: Vec<LossPoint>,
    /// Fraction of patterns classified correctly, each evaluated once.
    pub accuracy: f64,
    /// First logged step with accuracy at or above 99%, if any.
    pub steps_to_99: Option<usize>,
    /// Mean gate on planted completions and on all other positions.
    pub gate_planted: f64,
    pub gate_background: f64,
}

impl ToyReport {
    pub fn gate_delta(&self) -> f64 {
        self.gate_planted - self.gate_background
    }
}

/// The trainable toy model.
pub struct ToyModel {
    pub config: ToyConfig,
    pub ngram: NGramConfig,
    pub store: ShardedStore<f64>,
    pub weights: EngramLayerWeights,
    /// Frozen backbone states, `[vocab, d]` per branch.
    pub embed: Vec<Array2<f64>>,
    /// Head `[classes, d]` and bias.
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub sentinel: u32,
}

/// Per-sequence forward output used by evaluation and gate export.
pub struct SequenceTrace {
    pub logits: Array2<f64>,
    /// Gate per branch, `[T]` each.
    pub alphas: Vec<Array1<f64>>,
}

struct SeqGrads {
    loss: f64,
    plan: RetrievalPlan,
    grad_e: Array2<f64>,
    weights: EngramLayerWeights,
    head: Array2<f64>,
    head_bias: Array1<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tables = config.heads;
        let sizes = choose_table_sizes(config.slots_per_table * tables as u64, tables)?;
        let ngram = NGramConfig::new(vec![2], config.heads, rng.random(), sizes.sizes)?;
        let store = ShardedStore::random_normal(
            0,
            &ngram.table_keys(),
            ngram.table_sizes(),
            config.d_sub,
            config.table_std,
            rng.random(),
            1,
        )?;
        let dims = LayerDims::new(config.hidden, config.d_sub * tables, config.branches, ngram.max_order());
        let weights = EngramLayerWeights::init(
            dims,
            &InitConfig {
                seed: rng.random(),
                ..Default::default()
            },
        )?;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embed = (0..config.branches)
            .map(|_| Array2::from_shape_fn((config.vocab, config.hidden), |_| normal.sample(&mut rng)))
            .collect();
        Ok(Self {
            ngram,
            store,
            weights,
            embed,
            head: Array2::zeros((config.classes, config.hidden)),
            head_bias: Array1::zeros(config.classes),
            sentinel: config.vocab as u32,
            config,
        })
    }

    fn hidden(&self, tokens: &[u32]) -> Vec<Array2<f64>> {
        self.embed
            .iter()
            .map(|table| {
                Array2::from_shape_fn((tokens.len(), self.config.hidden), |(t, i)| table[[tokens[t] as usize, i]])
            })
            .collect()
    }

    fn features(&self, hidden: &[Array2<f64>], ys: &[Array2<f64>], t: usize) -> Vec<f64> {
        let scale = 1.0 / hidden.len() as f64;
        let mut z = vec![0.0; self.config.hidden];
        for (h, y) in hidden.iter().zip(ys) {
            for i in 0..z.len() {
                z[i] += (h[[t, i]] + y[[t, i]]) * scale;
            }
        }
        z
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.config.classes)
            .map(|c| {
                let mut acc = self.head_bias[c];
                for i in 0..z.len() {
                    acc += self.head[[c, i]] * z[i];
                }
                acc
            })
            .collect()
    }

    /// Runs one sequence and returns logits at every position and the gates.
    pub fn trace(&self, tokens: &[u32]) -> Result<SequenceTrace> {
        let plan = plan_retrieval(tokens, &self.ngram, self.sentinel);
        let e = self.store.gather(&plan)?;
        let hidden = self.hidden(tokens);
        let (ys, tape) = forward_memory_with(&hidden, &e, &self.weights, self.config.gate_override)?;
        let mut logits = Array2::zeros((tokens.len(), self.config.classes));
        for t in 0..tokens.len() {
            let z = self.features(&hidden, &ys, t);
            for (c, v) in self.logits(&z).into_iter().enumerate() {
                logits[[t, c]] = v;
            }
        }
        Ok(SequenceTrace {
            logits,
            alphas: tape.alphas(),
        })
    }

    /// Loss and gradients of one sequence; targets sit on odd positions.
    fn sequence_grads(&self, pairs: &[Pattern]) -> Result<SeqGrads> {
        let tokens = sequence_tokens(pairs);
        let t_len = tokens.len();
        let d = self.config.hidden;
        let plan = plan_retrieval(&tokens, &self.ngram, self.sentinel);
        let e = self.store.gather(&plan)?;
        let hidden = self.hidden(&tokens);
        let (ys, tape) = forward_memory_with(&hidden, &e, &self.weights, self.config.gate_override)?;
        let m = hidden.len();
        let mut dy = vec![Array2::<f64>::zeros((t_len, d)); m];
        let mut head = Array2::zeros(self.head.dim());
        let mut head_bias = Array1::zeros(self.config.classes);
        let mut loss = 0.0;
        for (j, p) in pairs.iter().enumerate() {
            let t = 2 * j + 1;
            let z = self.features(&hidden, &ys, t);
            let probs = softmax(&self.logits(&z));
            loss -= probs[p.class as usize].max(f64::MIN_POSITIVE).ln();
            let mut dz = vec![0.0; d];
            for (c, &pc) in probs.iter().enumerate() {
                let g = pc - if c == p.class as usize { 1.0 } else { 0.0 };
                head_bias[c] += g;
                for i in 0..d {
                    head[[c, i]] += g * z[i];
                    dz[i] += g * self.head[[c, i]];
                }
            }
            for dyb in &mut dy {
                for i in 0..d {
                    dyb[[t, i]] = dz[i] / m as f64;
                }
            }
        }
        let g = engram_layer_backward(&tape, &dy, &self.weights)?;
        Ok(SeqGrads {
            loss,
            plan,
            grad_e: g.grad_e,
            weights: g.weights,
            head,
            head_bias,
        })
    }

    /// Accuracy over `patterns`, each evaluated once, plus mean gates on
    /// planted completions and on the remaining positions.
    pub fn evaluate(&self, patterns: &[Pattern]) -> Result<(f64, f64, f64)> {
        let chunks: Vec<&[Pattern]> = patterns.chunks(self.config.pairs_per_sequence).collect();
        let per_chunk = chunks
            .par_iter()
            .map(|pairs| {
                let tr = self.trace(&sequence_tokens(pairs))?;
                let mut correct = 0usize;
                let (mut planted, mut background) = (0.0, 0.0);
                for (j, p) in pairs.iter().enumerate() {
                    let row = tr.logits.row(2 * j + 1);
                    // argmax, first index wins ties
                    let mut best = 0;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    correct += (best == p.class as usize) as usize;
                    for a in &tr.alphas {
                        planted += a[2 * j + 1];
                        background += a[2 * j];
                    }
                }
                Ok((correct, planted, background))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut correct, mut planted, mut background) = (0usize, 0.0, 0.0);
        for (c, p, b) in per_chunk {
            correct += c;
            planted += p;
            background += b;
        }
        let gates = (patterns.len() * self.config.branches) as f64;
        Ok((correct as f64 / patterns.len() as f64, planted / gates, background / gates))
    }
}

/// Interleaves planted pairs into one token sequence.
pub fn sequence_tokens(pairs: &[Pattern]) -> Vec<u32> {
    pairs.iter().flat_map(|p| [p.first, p.second]).collect()
}

/// Trains the toy model and reports the loss curve, accuracy and gate statistics.
pub fn train_toy(config: &ToyConfig) -> Result<(ToyReport, ToyModel, Vec<Pattern>)> {
    let mut model = ToyModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let patterns = planted_patterns(config.vocab, config.classes, &mut rng);
    let table_opt = SparseAdamConfig {
        lr_base: config.lr,
        lr_multiplier: config.table_lr_multiplier,
        ..Default::default()
    };
    let mut weight_opt = DenseAdam::new(model.weights.param_count(), config.lr);
    let head_len = model.head.len() + model.head_bias.len();
    let mut head_opt = DenseAdam::new(head_len, config.lr);
    let mut loss_curve = Vec::new();
    let mut steps_to_99 = None;

    for step in 0..config.steps {
        let batch: Vec<Vec<Pattern>> = (0..config.batch)
            .map(|_| {
                (0..config.pairs_per_sequence)
                    .map(|_| patterns[rng.random_range(0..patterns.len())])
                    .collect()
            })
            .collect();
        let per_seq = batch
            .par_iter()
            .map(|pairs| model.sequence_grads(pairs))
            .collect::<Result<Vec<_>>>()?;

        let count = (config.batch * config.pairs_per_sequence) as f64;
        let scale = 1.0 / count;
        let mut loss = 0.0;
        let mut wg = EngramLayerWeights::zeros(model.weights.dims);
        let mut head_g = vec![0.0; head_len];
        for g in &per_seq {
            loss += g.loss;
            wg.add_scaled(&g.weights, scale);
            let hg = g.head.iter().chain(g.head_bias.iter());
            for (acc, &x) in head_g.iter_mut().zip(hg) {
                *acc += x * scale;
            }
            model.store.scatter_add(&g.plan, (&g.grad_e * scale).view())?;
        }
        model.store.sparse_adam_step(&table_opt)?;

        let mut flat = model.weights.flatten();
        weight_opt.step(&mut flat, &wg.flatten());
        model.weights.unflatten(&flat);

        let mut flat: Vec<f64> = model.head.iter().chain(model.head_bias.iter()).copied().collect();
        head_opt.step(&mut flat, &head_g);
        let (hw, hb) = flat.split_at(model.head.len());
        model.head.as_slice_mut().unwrap().copy_from_slice(hw);
        model.head_bias.as_slice_mut().unwrap().copy_from_slice(hb);

        let done = step + 1;
        if done % config.log_every == 0 || done == config.steps {
            loss_curve.push(LossPoint {
                step: done,
                loss: loss / count,
            });
            if steps_to_99.is_none() {
                let (acc, _, _) = model.evaluate(&patterns)?;
                if acc >= 0.99 {
                    steps_to_99 = Some(done);
                }
            }
        }
    }

    let (accuracy, gate_planted, gate_background) = model.evaluate(&patterns)?;
    let report = ToyReport {
        config: config.clone(),
        patterns: patterns.len(),
        table_sizes: model.ngram.table_sizes().to_vec(),
        loss_curve,
        accuracy,
        steps_to_99,
        gate_planted,
        gate_background,
    };
    Ok((report, model, patterns))
}
