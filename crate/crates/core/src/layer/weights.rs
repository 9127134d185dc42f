//! Dense parameters of an Engram layer and the `EGLW` weight file.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, EngramError, Result};
use crate::io::{put_f32s, read_all, write_all, Cursor};

const WEIGHTS_MAGIC: &[u8; 4] = b"EGLW";
const WEIGHTS_VERSION: u32 = 1;

/// Kernel width of the causal convolution.
pub const CONV_WIDTH: usize = 4;

/// Sizes of an Engram layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    /// Backbone hidden size `d`.
    pub hidden: usize,
    /// Width of the concatenated memory vector `d_mem`.
    pub mem: usize,
    /// Number of residual branches `M`.
    pub branches: usize,
    /// Convolution kernel width `w`.
    pub kernel: usize,
    /// Convolution dilation, the largest N-gram order.
    pub dilation: usize,
}

impl LayerDims {
    pub fn new(hidden: usize, mem: usize, branches: usize, dilation: usize) -> Self {
        Self {
            hidden,
            mem,
            branches,
            kernel: CONV_WIDTH,
            dilation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.mem == 0 || self.branches == 0 || self.kernel == 0 {
            return config_err(format!("layer sizes must be positive: {self:?}"));
        }
        if self.dilation == 0 {
            return config_err("convolution dilation must be positive");
        }
        Ok(())
    }
}

/// Parameters of one Engram layer. The same struct holds their gradients.
///
/// Tap `j` of the depthwise kernel multiplies the input `j * dilation`
/// positions back, so column 0 reads the current position.
#[derive(Debug, Clone, PartialEq)]
pub struct EngramLayerWeights {
    pub dims: LayerDims,
    /// Value projection `[d, d_mem]`, shared by all branches.
    pub w_v: Array2<f64>,
    /// Per-branch key projections, each `[d, d_mem]`.
    pub w_k: Vec<Array2<f64>>,
    pub gain_h: Array1<f64>,
    pub gain_k: Array1<f64>,
    /// Depthwise kernel `[d, w]`, shared by all branches.
    pub conv_kernel: Array2<f64>,
    pub conv_bias: Array1<f64>,
    pub gain_conv: Array1<f64>,
}

/// Initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Standard deviation of `W_K` and `W_V`; `None` means `1 / sqrt(d_mem)`.
    pub proj_std: Option<f64>,
    /// Standard deviation of embedding rows.
    pub table_std: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            proj_std: None,
            table_std: 0.006,
            seed: 0,
        }
    }
}

impl EngramLayerWeights {
    /// All-zero tensors, gains included. Used as a gradient accumulator.
    pub fn zeros(dims: LayerDims) -> Self {
        let (d, dm) = (dims.hidden, dims.mem);
        Self {
            dims,
            w_v: Array2::zeros((d, dm)),
            w_k: vec![Array2::zeros((d, dm)); dims.branches],
            gain_h: Array1::zeros(d),
            gain_k: Array1::zeros(d),
            conv_kernel: Array2::zeros((d, dims.kernel)),
            conv_bias: Array1::zeros(d),
            gain_conv: Array1::zeros(d),
        }
    }

    /// Random projections, unit gains, zero convolution.
    pub fn init(dims: LayerDims, init: &InitConfig) -> Result<Self> {
        dims.validate()?;
        let std = init.proj_std.unwrap_or(1.0 / (dims.mem as f64).sqrt());
        let normal = Normal::new(0.0, std).map_err(|e| EngramError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut w = Self::zeros(dims);
        w.w_v.mapv_inplace(|_| normal.sample(&mut rng));
        for k in &mut w.w_k {
            k.mapv_inplace(|_| normal.sample(&mut rng));
        }
        w.gain_h.fill(1.0);
        w.gain_k.fill(1.0);
        w.gain_conv.fill(1.0);
        Ok(w)
    }

    /// Checks every tensor against `dims`.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims;
        dims.validate()?;
        let (d, dm) = (dims.hidden, dims.mem);
        if self.w_v.dim() != (d, dm) {
            return shape_err(format!("W_V is {:?}, expected {:?}", self.w_v.dim(), (d, dm)));
        }
        if self.w_k.len() != dims.branches || self.w_k.iter().any(|k| k.dim() != (d, dm)) {
            return shape_err("W_K must hold one [d, d_mem] matrix per branch");
        }
        if self.conv_kernel.dim() != (d, dims.kernel) {
            return shape_err("conv kernel must be [d, w]");
        }
        for v in [&self.gain_h, &self.gain_k, &self.conv_bias, &self.gain_conv] {
            if v.len() != d {
                return shape_err("gain and bias vectors must have length d");
            }
        }
        Ok(())
    }

    /// Tensors in file order: `W_V, W_K[0..M], gain_h, gain_k, conv_kernel, conv_bias, gain_conv`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.w_v.as_slice().expect("standard layout")];
        out.extend(self.w_k.iter().map(|k| k.as_slice().expect("standard layout")));
        out.push(self.gain_h.as_slice().unwrap());
        out.push(self.gain_k.as_slice().unwrap());
        out.push(self.conv_kernel.as_slice().unwrap());
        out.push(self.conv_bias.as_slice().unwrap());
        out.push(self.gain_conv.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.w_v.as_slice_mut().expect("standard layout")];
        out.extend(self.w_k.iter_mut().map(|k| k.as_slice_mut().expect("standard layout")));
        out.push(self.gain_h.as_slice_mut().unwrap());
        out.push(self.gain_k.as_slice_mut().unwrap());
        out.push(self.conv_kernel.as_slice_mut().unwrap());
        out.push(self.conv_bias.as_slice_mut().unwrap());
        out.push(self.gain_conv.as_slice_mut().unwrap());
        out
    }

    /// Names matching [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["w_v".to_owned()];
        out.extend((0..self.w_k.len()).map(|m| format!("w_k[{m}]")));
        out.extend(["gain_h", "gain_k", "conv_kernel", "conv_bias", "gain_conv"].map(String::from));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flattened copy of all tensors in file order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [dims.hidden, dims.mem, dims.branches, dims.kernel, dims.dilation] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in self.tensors() {
            put_f32s(&mut out, t.iter().map(|&x| x as f32));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes, "weights");
        if c.take(4)? != WEIGHTS_MAGIC {
            return Err(c.err("missing EGLW magic"));
        }
        if c.u32()? != WEIGHTS_VERSION {
            return Err(c.err("unsupported version"));
        }
        let mut h = [0usize; 5];
        for v in &mut h {
            *v = c.u32()? as usize;
        }
        let dims = LayerDims {
            hidden: h[0],
            mem: h[1],
            branches: h[2],
            kernel: h[3],
            dilation: h[4],
        };
        dims.validate()?;
        let mut w = Self::zeros(dims);
        for t in w.tensors_mut() {
            let vals = c.f32s(t.len())?;
            for (x, v) in t.iter_mut().zip(vals) {
                *x = v as f64;
            }
        }
        c.finish()?;
        Ok(w)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        write_all(path, &self.to_bytes())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_all(path)?)
    }
}
