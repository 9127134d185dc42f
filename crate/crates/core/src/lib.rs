//! Conditional memory via hashed N-gram lookup.
//!
//! The crate is organised around the lifetime of a lookup:
//!
//! - [`vocab`] collapses textually equivalent raw tokens onto canonical ids.
//! - [`hasher`] turns canonical suffix N-grams into per-table row indices.
//! - [`store`] owns the embedding tables: sharded gather / scatter-add, the
//!   lazy sparse Adam optimizer, the hot-tier cache and the prefetch simulator.
//! - [`layer`] fuses retrieved memory into a (multi-branch) residual stream
//!   through a context-aware scalar gate and a short causal convolution, with
//!   analytic gradients.
//! - [`planner`] does the parameter accounting for splitting a sparse budget
//!   between routed experts and memory slots.
//! - [`analysis`] holds the representation-analysis tools (logit lens, CKA,
//!   soft alignment, gate export).
//! - [`io`] reads and writes the binary tensor, table and weight formats.

// NaN-rejecting `!(x > 0.0)` checks and index loops with a fixed summation
// order are intentional throughout the numeric code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod hasher;
pub mod io;
pub mod layer;
pub mod planner;
pub mod store;
pub mod vocab;

pub use error::{EngramError, Result};
