//! Context-aware gating.
//!
//! For branch `m` at position `t`:
//!
//! ```text
//! k = W_K[m] e_t            v = W_V e_t   (shared by all branches)
//! alpha = sigmoid(RMSNorm(h_t[m]) . RMSNorm(k) / sqrt(d))
//! u = alpha * v
//! ```

use ndarray::{Array1, Array2};

use super::norm::{rmsnorm_backward, rmsnorm_into};
use super::weights::EngramLayerWeights;
use crate::error::{shape_err, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = W x` for a row-major `W`, summing in index order.
#[inline]
pub(crate) fn matvec(w: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let w = w.as_slice().expect("standard layout");
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        *o = acc;
    }
}

/// `dw += dy x^T` and `dx += W^T dy`.
#[inline]
pub(crate) fn matvec_backward(w: &Array2<f64>, x: &[f64], dy: &[f64], dw: &mut Array2<f64>, dx: &mut [f64]) {
    let cols = x.len();
    let w = w.as_slice().expect("standard layout");
    let dw = dw.as_slice_mut().expect("standard layout");
    for (i, &g) in dy.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let drow = &mut dw[i * cols..(i + 1) * cols];
        for j in 0..cols {
            drow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
}

/// Forward state of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGate {
    pub h: Array2<f64>,
    pub h_norm: Array2<f64>,
    pub h_rms: Vec<f64>,
    pub k: Array2<f64>,
    pub k_norm: Array2<f64>,
    pub k_rms: Vec<f64>,
    pub alpha: Array1<f64>,
    /// Gated value `alpha * v`, `[T, d]`.
    pub u: Array2<f64>,
}

/// Forward state of the gate for all branches.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTape {
    /// Shared value `W_V e`, `[T, d]`.
    pub v: Array2<f64>,
    pub branches: Vec<BranchGate>,
    /// Gate value forced for every position, if any.
    pub gate_override: Option<f64>,
}

fn check_inputs(h: &[Array2<f64>], e: &Array2<f64>, w: &EngramLayerWeights) -> Result<()> {
    let dims = w.dims;
    if h.len() != dims.branches {
        return shape_err(format!("{} hidden branches for {} key projections", h.len(), dims.branches));
    }
    if e.ncols() != dims.mem {
        return shape_err(format!("memory width {} but d_mem = {}", e.ncols(), dims.mem));
    }
    for hb in h {
        if hb.dim() != (e.nrows(), dims.hidden) {
            return shape_err(format!(
                "hidden branch is {:?}, expected {:?}",
                hb.dim(),
                (e.nrows(), dims.hidden)
            ));
        }
    }
    Ok(())
}

/// Gates the shared value with one scalar per branch and position.
pub fn gate_forward(h: &[Array2<f64>], e: &Array2<f64>, w: &EngramLayerWeights) -> Result<GateTape> {
    gate_forward_with(h, e, w, None)
}

/// [`gate_forward`], optionally forcing every gate to a constant.
pub fn gate_forward_with(h: &[Array2<f64>], e: &Array2<f64>, w: &EngramLayerWeights, gate_override: Option<f64>) -> Result<GateTape> {
    check_inputs(h, e, w)?;
    let e = e.as_standard_layout();
    let (t_len, d) = (e.nrows(), w.dims.hidden);
    let scale = 1.0 / (d as f64).sqrt();
    let gain_h = w.gain_h.as_slice().unwrap();
    let gain_k = w.gain_k.as_slice().unwrap();

    let mut v = Array2::zeros((t_len, d));
    for t in 0..t_len {
        matvec(&w.w_v, e.row(t).as_slice().unwrap(), v.row_mut(t).into_slice().unwrap());
    }

    let mut branches = Vec::with_capacity(h.len());
    for (m, hb) in h.iter().enumerate() {
        let hb = hb.as_standard_layout().into_owned();
        let mut b = BranchGate {
            h_norm: Array2::zeros((t_len, d)),
            h_rms: vec![0.0; t_len],
            k: Array2::zeros((t_len, d)),
            k_norm: Array2::zeros((t_len, d)),
            k_rms: vec![0.0; t_len],
            alpha: Array1::zeros(t_len),
            u: Array2::zeros((t_len, d)),
            h: hb,
        };
        for t in 0..t_len {
            b.h_rms[t] = rmsnorm_into(
                b.h.row(t).as_slice().unwrap(),
                gain_h,
                b.h_norm.row_mut(t).into_slice().unwrap(),
            );
            matvec(&w.w_k[m], e.row(t).as_slice().unwrap(), b.k.row_mut(t).into_slice().unwrap());
            b.k_rms[t] = rmsnorm_into(
                b.k.row(t).as_slice().unwrap(),
                gain_k,
                b.k_norm.row_mut(t).into_slice().unwrap(),
            );
            let alpha = match gate_override {
                Some(a) => a,
                None => {
                    let (hn, kn) = (b.h_norm.row(t), b.k_norm.row(t));
                    let mut s = 0.0;
                    for i in 0..d {
                        s += hn[i] * kn[i];
                    }
                    sigmoid(s * scale)
                }
            };
            b.alpha[t] = alpha;
            for i in 0..d {
                b.u[[t, i]] = alpha * v[[t, i]];
            }
        }
        branches.push(b);
    }
    Ok(GateTape {
        v,
        branches,
        gate_override,
    })
}

/// Backward of the gate. `du[m]` is the gradient wrt branch `m`'s gated value.
/// Returns the hidden-state gradients and adds the rest into `grads` / `grad_e`.
pub(crate) fn gate_backward(
    tape: &GateTape,
    e: &Array2<f64>,
    du: &[Array2<f64>],
    w: &EngramLayerWeights,
    grads: &mut EngramLayerWeights,
    grad_e: &mut Array2<f64>,
) -> Vec<Array2<f64>> {
    let (t_len, d) = tape.v.dim();
    let e = e.as_standard_layout();
    let scale = 1.0 / (d as f64).sqrt();
    let gain_h = w.gain_h.as_slice().unwrap();
    let gain_k = w.gain_k.as_slice().unwrap();
    let mut dv = Array2::<f64>::zeros((t_len, d));
    let mut d_hidden = Vec::with_capacity(tape.branches.len());
    let mut dhn = vec![0.0; d];
    let mut dkn = vec![0.0; d];
    let mut dk = vec![0.0; d];
    for (m, (b, du_m)) in tape.branches.iter().zip(du).enumerate() {
        let mut dh = Array2::<f64>::zeros((t_len, d));
        for t in 0..t_len {
            let alpha = b.alpha[t];
            let mut dalpha = 0.0;
            for i in 0..d {
                let g = du_m[[t, i]];
                dalpha += g * tape.v[[t, i]];
                dv[[t, i]] += alpha * g;
            }
            if tape.gate_override.is_some() {
                continue;
            }
            let ds = dalpha * alpha * (1.0 - alpha) * scale;
            for i in 0..d {
                dhn[i] = ds * b.k_norm[[t, i]];
                dkn[i] = ds * b.h_norm[[t, i]];
                dk[i] = 0.0;
            }
            rmsnorm_backward(
                &dhn,
                b.h.row(t).as_slice().unwrap(),
                gain_h,
                b.h_rms[t],
                dh.row_mut(t).into_slice().unwrap(),
                grads.gain_h.as_slice_mut().unwrap(),
            );
            rmsnorm_backward(
                &dkn,
                b.k.row(t).as_slice().unwrap(),
                gain_k,
                b.k_rms[t],
                &mut dk,
                grads.gain_k.as_slice_mut().unwrap(),
            );
            matvec_backward(
                &w.w_k[m],
                e.row(t).as_slice().unwrap(),
                &dk,
                &mut grads.w_k[m],
                grad_e.row_mut(t).into_slice().unwrap(),
            );
        }
        d_hidden.push(dh);
    }
    for t in 0..t_len {
        matvec_backward(
            &w.w_v,
            e.row(t).as_slice().unwrap(),
            dv.row(t).as_slice().unwrap(),
            &mut grads.w_v,
            grad_e.row_mut(t).into_slice().unwrap(),
        );
    }
    d_hidden
}
