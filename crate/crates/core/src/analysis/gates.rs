use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Which (layer, branch) a heatmap column holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateColumn {
    pub layer: usize,
    pub branch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub position: usize,
    pub token_text: String,
    /// One value per entry of [`GateHeatmap::columns`].
    pub alpha: Vec<f64>,
}

/// Per-token gate values, ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateHeatmap {
    pub columns: Vec<GateColumn>,
    pub records: Vec<GateRecord>,
}

/// Builds the heatmap from `alpha[layer][branch]` (each `[T]`).
///
/// `layer_ids` renames layers (e.g. to their depth in the backbone);
/// `select` keeps only the listed branches.
pub fn export_gate_heatmap(
    tokens: &[String],
    alpha: &[Vec<Array1<f64>>],
    layer_ids: Option<&[usize]>,
    select: Option<&[usize]>,
) -> Result<GateHeatmap> {
    if let Some(ids) = layer_ids {
        if ids.len() != alpha.len() {
            return shape_err(format!("{} layer ids for {} layers", ids.len(), alpha.len()));
        }
    }
    let mut columns = Vec::new();
    let mut series = Vec::new();
    for (l, branches) in alpha.iter().enumerate() {
        for (b, a) in branches.iter().enumerate() {
            if select.is_some_and(|s| !s.contains(&b)) {
                continue;
            }
            if a.len() != tokens.len() {
                return shape_err(format!(
                    "layer {l} branch {b} has {} gates for {} tokens",
                    a.len(),
                    tokens.len()
                ));
            }
            columns.push(GateColumn {
                layer: layer_ids.map_or(l, |ids| ids[l]),
                branch: b,
            });
            series.push(a);
        }
    }
    let records = tokens
        .iter()
        .enumerate()
        .map(|(t, text)| GateRecord {
            position: t,
            token_text: text.clone(),
            alpha: series.iter().map(|a| a[t]).collect(),
        })
        .collect();
    Ok(GateHeatmap { columns, records })
}
