use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, EngramError, Result};

/// Unbiased HSIC of two symmetric Gram matrices, diagonals ignored.
///
/// ```text
/// [tr(K~ L~) + (1'K~1)(1'L~1) / ((n-1)(n-2)) - 2/(n-2) 1'K~L~1] / (n(n-3))
/// ```
pub fn hsic_unbiased(k: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>) -> Result<f64> {
    let n = k.nrows();
    if k.dim() != (n, n) || l.dim() != (n, n) {
        return shape_err("Gram matrices must be square and equal in size");
    }
    if n < 4 {
        return Err(EngramError::Undefined(format!("unbiased HSIC needs n >= 4, got {n}")));
    }
    let mut trace = 0.0;
    let (mut sum_k, mut sum_l, mut cross) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (mut row_k, mut row_l) = (0.0, 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (k[[i, j]], l[[i, j]]);
            trace += a * b;
            row_k += a;
            row_l += b;
        }
        sum_k += row_k;
        sum_l += row_l;
        cross += row_k * row_l;
    }
    let nf = n as f64;
    let value = trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross;
    Ok(value / (nf * (nf - 3.0)))
}

/// `X X'` after centering each column of `x`.
pub fn linear_gram(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    let c = &x - &mean;
    c.dot(&c.t())
}

/// A CKA value and the estimate before clamping to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cka {
    pub value: f64,
    pub unclamped: f64,
}

fn batch_ranges(n: usize, minibatch: Option<usize>) -> Result<Vec<(usize, usize)>> {
    let b = minibatch.unwrap_or(n).min(n);
    if b < 4 {
        return Err(EngramError::Undefined(format!("CKA needs at least 4 rows per batch, got {b}")));
    }
    // a short trailing batch is dropped
    Ok((0..n / b).map(|i| (i * b, (i + 1) * b)).collect())
}

/// Linear CKA between `x` (`[n, d1]`) and `y` (`[n, d2]`).
///
/// With a minibatch size the rows are split into consecutive batches; the
/// three HSIC terms are averaged over batches before forming the ratio.
pub fn cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, minibatch: Option<usize>) -> Result<Cka> {
    if x.nrows() != y.nrows() {
        return shape_err(format!("row counts differ: {} vs {}", x.nrows(), y.nrows()));
    }
    let ranges = batch_ranges(x.nrows(), minibatch)?;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for &(s, e) in &ranges {
        let k = linear_gram(x.slice(ndarray::s![s..e, ..]));
        let l = linear_gram(y.slice(ndarray::s![s..e, ..]));
        xy += hsic_unbiased(k.view(), l.view())?;
        xx += hsic_unbiased(k.view(), k.view())?;
        yy += hsic_unbiased(l.view(), l.view())?;
    }
    let nb = ranges.len() as f64;
    let (xy, xx, yy) = (xy / nb, xx / nb, yy / nb);
    if !(xx > 0.0) || !(yy > 0.0) {
        return Err(EngramError::Validation("zero-variance input to CKA".into()));
    }
    let unclamped = xy / (xx * yy).sqrt();
    Ok(Cka {
        value: unclamped.clamp(0.0, 1.0),
        unclamped,
    })
}

/// Pairwise CKA between two layer stacks; `values[i][j]` compares layer `i`
/// of A with layer `j` of B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    /// Smallest unclamped estimate seen, to show how far clamping reached.
    pub min_unclamped: f64,
}

impl SimilarityMatrix {
    pub fn to_array(&self) -> Array2<f64> {
        let rows = self.values.len();
        let cols = self.values.first().map_or(0, Vec::len);
        Array2::from_shape_fn((rows, cols), |(i, j)| self.values[i][j])
    }
}

fn assemble(rows: usize, cols: usize, cells: Vec<((usize, usize), Cka)>, mirror: bool) -> SimilarityMatrix {
    let mut values = vec![vec![0.0; cols]; rows];
    let mut min_unclamped = f64::INFINITY;
    for ((i, j), c) in cells {
        values[i][j] = c.value;
        if mirror {
            values[j][i] = c.value;
        }
        min_unclamped = min_unclamped.min(c.unclamped);
    }
    SimilarityMatrix { values, min_unclamped }
}

pub fn cka_matrix(a: &[Array2<f64>], b: &[Array2<f64>], minibatch: Option<usize>) -> Result<SimilarityMatrix> {
    let pairs: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(i, j)| Ok(((i, j), cka(a[i].view(), b[j].view(), minibatch)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(a.len(), b.len(), cells, false))
}

/// Self-similarity of one stack: the upper triangle is computed and mirrored.
pub fn cka_self_matrix(a: &[Array2<f64>], minibatch: Option<usize>) -> Result<SimilarityMatrix> {
    let pairs: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (i..a.len()).map(move |j| (i, j))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(i, j)| Ok(((i, j), cka(a[i].view(), a[j].view(), minibatch)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(a.len(), a.len(), cells, true))
}
