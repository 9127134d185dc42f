use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::dump::HiddenDump;
use crate::error::{shape_err, EngramError, Result};

const NORM_TOL: f64 = 1e-6;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(EngramError::Validation(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(EngramError::Validation(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
///
/// Returns `+inf` when some `q_i = 0` while `p_i > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err(format!("support sizes differ: {} vs {}", p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pi * (pi.ln() - qi.ln());
    }
    Ok(acc.max(0.0))
}

pub fn log_softmax(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `KL(softmax(p_logits) || softmax(q_logits))`, computed from log-probabilities.
pub fn kl_from_logits(p_logits: ArrayView1<'_, f64>, q_logits: ArrayView1<'_, f64>) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return shape_err("logit vectors differ in length");
    }
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let mut acc = 0.0;
    for (&a, &b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        acc += p * (a - b);
    }
    Ok(acc.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerKl {
    pub layer: usize,
    pub mean_kl: f64,
}

/// Mean KL per layer between the lens distribution and the final one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensCurve {
    pub positions: usize,
    pub vocab: usize,
    pub layers: Vec<LayerKl>,
}

/// Projects every layer through `lm_head` (`[d, V]`) and compares the result
/// with `final_logits` (`[T, V]`), KL(final || layer) averaged over positions.
pub fn logitlens_curve(dump: &HiddenDump, lm_head: &Array2<f64>, final_logits: &Array2<f64>) -> Result<LogitLensCurve> {
    let (layers, t_len, d) = dump.tensor.dim();
    if lm_head.nrows() != d {
        return shape_err(format!("LM head has {} rows, hidden size is {d}", lm_head.nrows()));
    }
    let vocab = lm_head.ncols();
    if final_logits.dim() != (t_len, vocab) {
        return shape_err(format!(
            "final logits are {:?}, expected {:?}",
            final_logits.dim(),
            (t_len, vocab)
        ));
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let lens = dump.tensor.index_axis(ndarray::Axis(0), l).dot(lm_head);
        let mut sum = 0.0;
        for t in 0..t_len {
            sum += kl_from_logits(final_logits.row(t), lens.row(t))?;
        }
        out.push(LayerKl {
            layer: l,
            mean_kl: if t_len == 0 { 0.0 } else { sum / t_len as f64 },
        });
    }
    Ok(LogitLensCurve {
        positions: t_len,
        vocab,
        layers: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn basic_values() {
        assert_eq!(kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn logits_agree_with_probabilities() {
        let a = array![0.3, -1.0, 2.0, 0.0];
        let b = array![1.0, 0.5, -0.5, 0.2];
        let p: Vec<f64> = log_softmax(a.view()).iter().map(|x| x.exp()).collect();
        let q: Vec<f64> = log_softmax(b.view()).iter().map(|x| x.exp()).collect();
        let direct = kl_divergence(&p, &q).unwrap();
        assert!((direct - kl_from_logits(a.view(), b.view()).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn final_layer_has_zero_lens_kl() {
        let tensor = Array3::from_shape_fn((3, 4, 2), |(l, t, i)| ((l * 7 + t * 3 + i) as f64).sin());
        let dump = HiddenDump::new(tensor, Default::default()).unwrap();
        let head = array![[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]];
        let last = dump.tensor.index_axis(ndarray::Axis(0), 2).dot(&head);
        let curve = logitlens_curve(&dump, &head, &last).unwrap();
        assert_eq!(curve.layers.len(), 3);
        assert!(curve.layers[2].mean_kl < 1e-15);
        assert!(curve.layers[0].mean_kl > 0.0);
        assert!(logitlens_curve(&dump, &head.t().to_owned(), &last).is_err());
    }
}
