use std::path::Path;

use anyhow::{bail, Context, Result};
use engram_core::io::{read_tensor, to_f32_tensor, write_tensor};
use engram_core::vocab::VocabProjection;
use ndarray::{Array2, Array3, Axis, Ix2, Ix3};

/// Whitespace-separated token ids.
pub fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading tokens {}", path.display()))?;
    text.split_whitespace()
        .map(|w| w.parse::<u32>().with_context(|| format!("bad token id {w:?}")))
        .collect()
}

/// Projection from a file, else the identity over `vocab_size`.
pub fn load_projection(path: Option<&Path>, vocab_size: Option<u32>) -> Result<VocabProjection> {
    match (path, vocab_size) {
        (Some(p), _) => Ok(VocabProjection::read_file(p).with_context(|| format!("reading projection {}", p.display()))?),
        (None, Some(v)) => Ok(VocabProjection::identity(v)),
        (None, None) => bail!("need a projection file or a vocabulary size"),
    }
}

pub fn read_3d(path: &Path) -> Result<Array3<f64>> {
    let t = read_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    let t = t
        .into_dimensionality::<Ix3>()
        .with_context(|| format!("{} must be a rank-3 tensor", path.display()))?;
    Ok(t.mapv(|x| x as f64))
}

pub fn read_2d(path: &Path) -> Result<Array2<f64>> {
    let t = read_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    let t = t
        .into_dimensionality::<Ix2>()
        .with_context(|| format!("{} must be a rank-2 tensor", path.display()))?;
    Ok(t.mapv(|x| x as f64))
}

/// Splits `[M, T, d]` into one `[T, d]` matrix per branch.
pub fn branches(t: &Array3<f64>) -> Vec<Array2<f64>> {
    t.axis_iter(Axis(0)).map(|b| b.to_owned()).collect()
}

/// Stacks per-branch `[T, d]` matrices and writes them as `[M, T, d]`.
pub fn write_branches(path: &Path, parts: &[Array2<f64>]) -> Result<()> {
    let (t_len, d) = parts.first().map_or((0, 0), |p| p.dim());
    let stacked = Array3::from_shape_fn((parts.len(), t_len, d), |(m, t, i)| parts[m][[t, i]]);
    write_tensor(path, &to_f32_tensor(&stacked)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Parses `a,b,c` into numbers.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list entry {p:?}: {e}")))
        .collect()
}
