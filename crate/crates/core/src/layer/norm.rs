//! RMSNorm with a learned gain.

/// Added to the mean square before the square root.
pub const RMS_EPS: f64 = 1e-6;

/// Root of the mean square of `x`, plus [`RMS_EPS`] under the root.
#[inline]
pub fn rms(x: &[f64]) -> f64 {
    let mut ss = 0.0;
    for &v in x {
        ss += v * v;
    }
    (ss / x.len() as f64 + RMS_EPS).sqrt()
}

/// `y_i = gain_i * x_i / rms(x)`. Writes into `out` and returns `rms(x)`.
#[inline]
pub fn rmsnorm_into(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let r = rms(x);
    for i in 0..x.len() {
        out[i] = gain[i] * x[i] / r;
    }
    r
}

pub fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, gain, &mut out);
    out
}

/// Backward of [`rmsnorm_into`]. Adds into `dx` and `dgain`.
#[inline]
pub fn rmsnorm_backward(dy: &[f64], x: &[f64], gain: &[f64], r: f64, dx: &mut [f64], dgain: &mut [f64]) {
    let d = x.len() as f64;
    let mut dot = 0.0;
    for i in 0..x.len() {
        dot += dy[i] * gain[i] * x[i];
    }
    let coef = dot / (d * r * r * r);
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] / r;
        dx[i] += dy[i] * gain[i] / r - x[i] * coef;
    }
}
