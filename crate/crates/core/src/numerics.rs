//! Dense row-major `f64` tensors and the kernels the model is built from.
//!
//! Kernels come in two flavours: `Tensor`-level functions that validate
//! shapes and allocate, and slice-level functions (`gemm*`, `*_in_place`)
//! used on hot paths where the caller already owns the buffers.

use crate::error::{Error, Result};

/// Default rotary base.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "every dimension must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zero-sized tensor {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (panics otherwise).
    pub fn rows(&self) -> usize {
        self.expect_matrix();
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.expect_matrix();
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn expect_matrix(&self) {
        assert_eq!(
            self.rank(),
            2,
            "expected a matrix, got shape {:?}",
            self.shape
        );
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "left operand")?;
    let (k2, n) = require_matrix(b, "right operand")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    strided_gemm(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    strided_gemm(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    strided_gemm(a, (1, m), b, (n, 1), out, m, k, n);
}

/// `out += A · B` where A and B are read through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the callers assert every buffer length against m, k, n, and
    // the strides describe row-major or transposed row-major views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_row(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::Dimension(format!(
            "softmax_row expects a vector, got shape {:?}",
            x.shape()
        )));
    }
    let mut out = x.clone();
    softmax_in_place(&mut out.data);
    Ok(out)
}

/// Numerically stable softmax (max subtracted first). No-op on an empty slice.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape() != gain.shape() || x.rank() != 1 {
        return Err(Error::Dimension(format!(
            "rms_norm needs matching vectors, got {:?} and {:?}",
            x.shape(),
            gain.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "rms_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    rms_norm_into(&x.data, &gain.data, eps, &mut out);
    Tensor::vector(out)
}

/// Writes `x·gain / sqrt(mean(x²)+eps)` into `out` and returns the inverse RMS.
pub fn rms_norm_into(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Rotates each row of `x` (`seq × head_dim`) by its absolute position
/// `position_offset + row`, with the default base.
pub fn rope_rotate(x: &Tensor, position_offset: usize) -> Result<Tensor> {
    rope_rotate_with_base(x, position_offset, ROPE_BASE)
}

pub fn rope_rotate_with_base(x: &Tensor, position_offset: usize, base: f64) -> Result<Tensor> {
    let (seq, head_dim) = require_matrix(x, "rope input")?;
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head dimension, got {head_dim}"
        )));
    }
    let mut out = x.clone();
    for r in 0..seq {
        rope_in_place(out.row_mut(r), position_offset + r, base);
    }
    Ok(out)
}

/// Rotates interleaved pairs `(v[2i], v[2i+1])` by `pos · base^(-2i/d)`.
pub fn rope_in_place(v: &mut [f64], pos: usize, base: f64) {
    rope_apply(v, pos, base, 1.0);
}

/// Inverse rotation (used for backprop through the rotation).
pub fn rope_inverse_in_place(v: &mut [f64], pos: usize, base: f64) {
    rope_apply(v, pos, base, -1.0);
}

fn rope_apply(v: &mut [f64], pos: usize, base: f64, sign: f64) {
    if pos == 0 {
        return;
    }
    let d = v.len();
    for i in 0..d / 2 {
        let theta = pos as f64 * base.powf(-((2 * i) as f64) / d as f64);
        let (s, c) = (sign * theta).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}
