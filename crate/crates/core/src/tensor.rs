//! Dense row-major f64 tensors and the raw numeric kernels shared by the
//! autodiff graph and the inference paths.
//!
//! Keeping one set of kernels means a value computed during training and the
//! same value computed at inference are bitwise identical.

use crate::error::{Error, Result};

/// A dense tensor: shape plus a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a 2-D matrix (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Last extent: the column count of the 2-D view.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · Bᵀ where B is n×k.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer norm. Returns (out, per-row mean, per-row 1/sqrt(var+eps)).
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
    (out, means, rstds)
}

/// Row-wise log-softmax over the last axis, max-subtracted for stability.
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in xr {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = xr[j] - log_z;
        }
    }
    out
}

/// Row-wise softmax restricted to `allowed` key positions; disallowed outputs
/// are exactly 0.0 and take no part in the normalization. `allowed(r, c)`.
pub fn masked_softmax_rows<F: Fn(usize, usize) -> bool>(
    x: &[f64],
    rows: usize,
    cols: usize,
    allowed: F,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in xr.iter().enumerate() {
            if allowed(r, c) && v > max {
                max = v;
            }
        }
        debug_assert!(max.is_finite(), "softmax row {r} has no allowed keys");
        let mut sum = 0.0;
        for (c, &v) in xr.iter().enumerate() {
            if allowed(r, c) {
                sum += (v - max).exp();
            }
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        for (c, &v) in xr.iter().enumerate() {
            if allowed(r, c) {
                o[c] = (v - max).exp() / sum;
            }
        }
    }
    out
}

/// Sinusoidal absolute position row for frame index `pos` (0-based).
pub fn sinusoid_position(pos: usize, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    for i in 0..dim {
        let exponent = (2 * (i / 2)) as f64 / dim as f64;
        let rate = 1.0 / 10000f64.powf(exponent);
        let angle = pos as f64 * rate;
        row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    row
}
