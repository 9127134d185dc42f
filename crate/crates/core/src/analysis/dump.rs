use std::path::Path;

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, EngramError, Result};
use crate::io::read_tensor;

/// Token metadata stored next to a dump as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenMeta {
    pub token_ids: Vec<u32>,
    pub token_text: Vec<String>,
    /// Half-open `[start, end)` position spans of named entities.
    pub entity_spans: Vec<(usize, usize)>,
}

/// Hidden states `[L, T, d]` with optional token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDump {
    pub tensor: Array3<f64>,
    pub meta: TokenMeta,
}

impl HiddenDump {
    pub fn new(tensor: Array3<f64>, meta: TokenMeta) -> Result<Self> {
        if tensor.iter().any(|x| !x.is_finite()) {
            return Err(EngramError::Validation("hidden dump has non-finite values".into()));
        }
        let t_len = tensor.dim().1;
        for (name, len) in [("token_ids", meta.token_ids.len()), ("token_text", meta.token_text.len())] {
            if len != 0 && len != t_len {
                return shape_err(format!("{name} has {len} entries for {t_len} positions"));
            }
        }
        if meta.entity_spans.iter().any(|&(s, e)| s >= e || e > t_len) {
            return shape_err("entity span out of range");
        }
        Ok(Self { tensor, meta })
    }

    /// Reads a rank-3 `.egts` tensor and an optional JSON sidecar.
    pub fn read(tensor: impl AsRef<Path>, sidecar: Option<&Path>) -> Result<Self> {
        let t = read_tensor(tensor)?;
        let t = t
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| EngramError::Shape("hidden dump must be a rank-3 tensor [L, T, d]".into()))?;
        let meta = match sidecar {
            Some(p) => serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(p)?))?,
            None => TokenMeta::default(),
        };
        Self::new(t.mapv(|x| x as f64), meta)
    }

    pub fn layers(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn positions(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.tensor.index_axis(Axis(0), l)
    }

    /// Rows used for similarity: the last token of each entity span when
    /// spans are present, every position otherwise.
    pub fn analysis_rows(&self) -> Vec<usize> {
        if self.meta.entity_spans.is_empty() {
            (0..self.positions()).collect()
        } else {
            self.meta.entity_spans.iter().map(|&(_, e)| e - 1).collect()
        }
    }

    /// Per-layer matrices restricted to [`analysis_rows`](Self::analysis_rows).
    pub fn layer_features(&self) -> Vec<ndarray::Array2<f64>> {
        let rows = self.analysis_rows();
        (0..self.layers()).map(|l| self.layer(l).select(Axis(0), &rows)).collect()
    }
}
