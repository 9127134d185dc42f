use ndarray::ArrayView2;

use crate::error::{config_err, Result};

/// For each column `j`, the similarity-weighted mean row index over the `k`
/// largest entries of that column (ties go to the smaller index).
///
/// A column whose top-`k` entries sum to zero has no defined index and
/// yields `None`.
pub fn soft_alignment(s: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Option<f64>>> {
    let rows = s.nrows();
    if k == 0 || k > rows {
        return config_err(format!("top-k must be in 1..={rows}, got {k}"));
    }
    let mut out = Vec::with_capacity(s.ncols());
    for col in s.columns() {
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &idx[..k] {
            num += col[i] * i as f64;
            den += col[i];
        }
        out.push((den != 0.0).then(|| num / den));
    }
    Ok(out)
}
