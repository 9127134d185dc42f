//! Representation analysis over hidden-state dumps: logit-lens KL curves,
//! linear CKA with the unbiased HSIC estimator, soft alignment between
//! layer stacks, and gate heatmap export.

mod align;
mod cka;
mod dump;
mod gates;
mod kl;

pub use align::soft_alignment;
pub use cka::{cka, cka_matrix, cka_self_matrix, hsic_unbiased, linear_gram, Cka, SimilarityMatrix};
pub use dump::{HiddenDump, TokenMeta};
pub use gates::{export_gate_heatmap, GateColumn, GateHeatmap, GateRecord};
pub use kl::{kl_divergence, kl_from_logits, log_softmax, logitlens_curve, LayerKl, LogitLensCurve};
