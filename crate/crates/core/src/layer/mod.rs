//! The Engram layer: gated retrieval fused into `M` residual branches.
//!
//! All arithmetic is `f64` with fixed summation order, so the same inputs
//! give bitwise-identical outputs on every run.

mod conv;
mod gate;
mod norm;
pub mod toy;
mod weights;

use ndarray::{Array1, Array2};

pub use conv::{conv_block, silu, ConvTape};
pub use gate::{gate_forward, gate_forward_with, sigmoid, BranchGate, GateTape};
pub use norm::{rms, rmsnorm, rmsnorm_backward, rmsnorm_into, RMS_EPS};
pub use weights::{EngramLayerWeights, InitConfig, LayerDims, CONV_WIDTH};

use crate::error::{config_err, shape_err, Result};
use crate::hasher::{plan_retrieval, NGramConfig, RetrievalPlan};
use crate::store::{Element, ShardedStore};
use crate::vocab::VocabProjection;

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct EngramForwardTape {
    /// Retrieved memory `[T, d_mem]`.
    pub e: Array2<f64>,
    pub gate: GateTape,
    /// One convolution tape per branch.
    pub conv: Vec<ConvTape>,
    /// Retrieval plan when the memory came from a store.
    pub plan: Option<RetrievalPlan>,
}

impl EngramForwardTape {
    pub fn positions(&self) -> usize {
        self.e.nrows()
    }

    pub fn branches(&self) -> usize {
        self.conv.len()
    }

    /// Gate values, one `[T]` vector per branch.
    pub fn alphas(&self) -> Vec<Array1<f64>> {
        self.gate.branches.iter().map(|b| b.alpha.clone()).collect()
    }

    /// Rebuilds the layer output from cached values.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        self.gate
            .branches
            .iter()
            .zip(&self.conv)
            .map(|(b, c)| c.output(&b.u))
            .collect()
    }
}

/// Gradients returned by [`engram_layer_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// Gradient wrt each branch's hidden state, `[T, d]`.
    pub d_hidden: Vec<Array2<f64>>,
    /// Gradient wrt the retrieved memory, `[T, d_mem]`; feed to `scatter_add`.
    pub grad_e: Array2<f64>,
    pub weights: EngramLayerWeights,
}

/// Runs the layer on already-retrieved memory `e` (`[T, d_mem]`).
pub fn forward_memory(
    hidden: &[Array2<f64>],
    e: &Array2<f64>,
    w: &EngramLayerWeights,
) -> Result<(Vec<Array2<f64>>, EngramForwardTape)> {
    forward_memory_with(hidden, e, w, None)
}

/// [`forward_memory`] with every gate optionally forced to a constant.
pub fn forward_memory_with(
    hidden: &[Array2<f64>],
    e: &Array2<f64>,
    w: &EngramLayerWeights,
    gate_override: Option<f64>,
) -> Result<(Vec<Array2<f64>>, EngramForwardTape)> {
    w.validate()?;
    let gate = gate_forward_with(hidden, e, w, gate_override)?;
    let mut ys = Vec::with_capacity(gate.branches.len());
    let mut convs = Vec::with_capacity(gate.branches.len());
    for b in &gate.branches {
        let (y, tape) = conv_block(&b.u, w)?;
        ys.push(y);
        convs.push(tape);
    }
    let tape = EngramForwardTape {
        e: e.as_standard_layout().into_owned(),
        gate,
        conv: convs,
        plan: None,
    };
    Ok((ys, tape))
}

/// Full pipeline: project tokens, hash suffix N-grams, gather from `store`,
/// then gate and convolve each branch. The caller adds the result to `hidden`.
pub fn engram_layer_forward<F: Element>(
    tokens: &[u32],
    hidden: &[Array2<f64>],
    projection: &VocabProjection,
    cfg: &NGramConfig,
    store: &ShardedStore<F>,
    w: &EngramLayerWeights,
) -> Result<(Vec<Array2<f64>>, EngramForwardTape)> {
    if w.dims.dilation != cfg.max_order() {
        return config_err(format!(
            "conv dilation {} must equal the largest N-gram order {}",
            w.dims.dilation,
            cfg.max_order()
        ));
    }
    if store.mem_dim() != w.dims.mem {
        return shape_err(format!("store gives {} memory features, weights expect {}", store.mem_dim(), w.dims.mem));
    }
    let canonical = projection.project_all(tokens)?;
    let plan = plan_retrieval(&canonical, cfg, projection.sentinel_id());
    let e = store.gather(&plan)?.mapv(|x| x.to_f64().expect("finite float"));
    let (ys, mut tape) = forward_memory(hidden, &e, w)?;
    tape.plan = Some(plan);
    Ok((ys, tape))
}

/// Analytic gradients of `sum_m <dY[m], Y[m]>` wrt every input and weight.
pub fn engram_layer_backward(
    tape: &EngramForwardTape,
    dy: &[Array2<f64>],
    w: &EngramLayerWeights,
) -> Result<LayerGrads> {
    let (t_len, d) = tape.gate.v.dim();
    if tape.branches() != w.dims.branches || d != w.dims.hidden || tape.e.ncols() != w.dims.mem {
        return shape_err("tape does not match the weights");
    }
    if dy.len() != tape.branches() {
        return shape_err(format!("{} output gradients for {} branches", dy.len(), tape.branches()));
    }
    if dy.iter().any(|g| g.dim() != (t_len, d)) {
        return shape_err(format!("output gradients must be [{t_len}, {d}]"));
    }
    let mut grads = EngramLayerWeights::zeros(w.dims);
    let du: Vec<Array2<f64>> = dy
        .iter()
        .zip(&tape.gate.branches)
        .zip(&tape.conv)
        .map(|((g, b), c)| conv::conv_block_backward(g, &b.u, c, w, &mut grads))
        .collect();
    let mut grad_e = Array2::zeros(tape.e.dim());
    let d_hidden = gate::gate_backward(&tape.gate, &tape.e, &du, w, &mut grads, &mut grad_e);
    Ok(LayerGrads {
        d_hidden,
        grad_e,
        weights: grads,
    })
}
