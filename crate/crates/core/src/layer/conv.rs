//! `Y = SiLU(Conv1D(RMSNorm(V))) + V` with a depthwise, causal, dilated kernel.

use ndarray::Array2;

use super::gate::sigmoid;
use super::norm::{rmsnorm_backward, rmsnorm_into};
use super::weights::EngramLayerWeights;
use crate::error::{shape_err, Result};

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Forward state of one convolution block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTape {
    pub rms: Vec<f64>,
    /// Normalized input, `[T, d]`.
    pub x: Array2<f64>,
    /// Convolution output before SiLU, `[T, d]`.
    pub c: Array2<f64>,
}

/// Applies the block to the gated values `vt` (`[T, d]`).
pub fn conv_block(vt: &Array2<f64>, w: &EngramLayerWeights) -> Result<(Array2<f64>, ConvTape)> {
    let d = w.dims.hidden;
    if vt.ncols() != d {
        return shape_err(format!("conv input has width {}, expected {d}", vt.ncols()));
    }
    let t_len = vt.nrows();
    let (width, dil) = (w.dims.kernel, w.dims.dilation);
    let vt = vt.as_standard_layout();
    let gain = w.gain_conv.as_slice().unwrap();
    let mut x = Array2::zeros((t_len, d));
    let mut rms = vec![0.0; t_len];
    for t in 0..t_len {
        rms[t] = rmsnorm_into(vt.row(t).as_slice().unwrap(), gain, x.row_mut(t).into_slice().unwrap());
    }
    let mut c = Array2::zeros((t_len, d));
    let mut y = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for i in 0..d {
            let mut acc = w.conv_bias[i];
            for j in 0..width {
                let back = j * dil;
                if back > t {
                    break;
                }
                acc += w.conv_kernel[[i, j]] * x[[t - back, i]];
            }
            c[[t, i]] = acc;
            y[[t, i]] = silu(acc) + vt[[t, i]];
        }
    }
    Ok((y, ConvTape { rms, x, c }))
}

impl ConvTape {
    /// Recomputes the block output from the tape.
    pub fn output(&self, vt: &Array2<f64>) -> Array2<f64> {
        let mut y = vt.to_owned();
        for ((t, i), v) in y.indexed_iter_mut() {
            *v += silu(self.c[[t, i]]);
        }
        y
    }
}

/// Backward of [`conv_block`]; returns the gradient wrt `vt`.
pub(crate) fn conv_block_backward(
    dy: &Array2<f64>,
    vt: &Array2<f64>,
    tape: &ConvTape,
    w: &EngramLayerWeights,
    grads: &mut EngramLayerWeights,
) -> Array2<f64> {
    let (t_len, d) = vt.dim();
    let (width, dil) = (w.dims.kernel, w.dims.dilation);
    let mut dvt = dy.to_owned();
    let mut dx = Array2::<f64>::zeros((t_len, d));
    for t in 0..t_len {
        for i in 0..d {
            let dc = dy[[t, i]] * silu_grad(tape.c[[t, i]]);
            grads.conv_bias[i] += dc;
            for j in 0..width {
                let back = j * dil;
                if back > t {
                    break;
                }
                grads.conv_kernel[[i, j]] += dc * tape.x[[t - back, i]];
                dx[[t - back, i]] += dc * w.conv_kernel[[i, j]];
            }
        }
    }
    let vt = vt.as_standard_layout();
    let gain = w.gain_conv.as_slice().unwrap();
    for t in 0..t_len {
        rmsnorm_backward(
            dx.row(t).as_slice().unwrap(),
            vt.row(t).as_slice().unwrap(),
            gain,
            tape.rms[t],
            dvt.row_mut(t).into_slice().unwrap(),
            grads.gain_conv.as_slice_mut().unwrap(),
        );
    }
    dvt
}
