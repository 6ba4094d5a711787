//! Dense reference numerics.
//!
//! Everything here is plain `f32` with `f32` accumulation. These routines are
//! the ground truth the sparse paths are checked against, so they favour a
//! fixed, readable summation order over speed.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, OmniError, Result};

/// Base of the rotary frequency ladder.
pub const ROPE_BASE: f64 = 10_000.0;

/// Row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, rejecting wrong lengths and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("data length {} does not match {rows}x{cols}", data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(OmniError::Parameter(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Overwrites rows starting at `start` with the rows of `src`.
    pub fn write_rows(&mut self, start: usize, src: &Matrix) {
        assert_eq!(src.cols, self.cols, "column mismatch in write_rows");
        assert!(start + src.rows <= self.rows, "write_rows out of range");
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f32, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in axpy");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in sub");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&mut self, alpha: f32) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`, computed in `f64`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in relative_error");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    diff / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// `out[j] = Σ_p a_row[p] · b[p][j]`, accumulated with `p` ascending.
#[inline]
pub(crate) fn row_matmul_into(a_row: &[f32], b: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(a_row.len(), b.rows);
    debug_assert_eq!(out.len(), b.cols);
    out.fill(0.0);
    for (p, &a) in a_row.iter().enumerate() {
        for (o, &bv) in out.iter_mut().zip(b.row(p)) {
            *o += a * bv;
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        row_matmul_into(a.row(i), b, c.row_mut(i));
    }
    Ok(c)
}

/// `a · bᵀ`, used for score tiles.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err!(
            "matmul_transposed {}x{} by ({}x{})^T",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn row_softmax(s: &Matrix) -> Matrix {
    let mut p = s.clone();
    for i in 0..p.rows {
        softmax_in_place(p.row_mut(i));
    }
    p
}

/// `softmax(q kᵀ / √d) · v`.
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(shape_err!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if q.rows == 0 || k.rows == 0 {
        return Err(shape_err!("attention needs at least one token"));
    }
    let mut scores = matmul_transposed(q, k)?;
    scores.scale(1.0 / (q.cols as f32).sqrt());
    let probs = row_softmax(&scores);
    matmul(&probs, v)
}

/// Token-wise RMS normalization.
pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> Vec<f32> {
    let mut out = x.to_vec();
    rms_norm_in_place(&mut out, weight, eps);
    out
}

pub(crate) fn rms_norm_in_place(x: &mut [f32], weight: &[f32], eps: f32) {
    assert_eq!(x.len(), weight.len(), "rms_norm weight length");
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for (v, w) in x.iter_mut().zip(weight) {
        *v = *v * w * inv;
    }
}

/// Interleaved-pair rotary encoding with base 10000.
pub fn rope(x: &[f32], position: usize) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_in_place(&mut out, position)?;
    Ok(out)
}

pub(crate) fn rope_in_place(x: &mut [f32], position: usize) -> Result<()> {
    let d = x.len();
    if !d.is_multiple_of(2) {
        return Err(shape_err!("rope needs an even dimension, got {d}"));
    }
    if position == 0 {
        return Ok(());
    }
    for j in 0..d / 2 {
        let theta = ROPE_BASE.powf(-2.0 * j as f64 / d as f64);
        let (sin, cos) = (position as f64 * theta).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        x[2 * j] = a * cos - b * sin;
        x[2 * j + 1] = a * sin + b * cos;
    }
    Ok(())
}

/// Means of consecutive row groups of size `pool`; a short trailing group is
/// averaged over its actual length.
pub fn mean_pool_blocks(x: &Matrix, pool: usize) -> Result<Matrix> {
    if pool == 0 {
        return Err(OmniError::Parameter("pool size must be at least 1".into()));
    }
    let groups = x.rows.div_ceil(pool);
    let mut out = Matrix::zeros(groups, x.cols);
    // f64 sums keep the mean of identical rows exact.
    let mut acc = vec![0.0f64; x.cols];
    for g in 0..groups {
        let start = g * pool;
        let end = (start + pool).min(x.rows);
        acc.fill(0.0);
        for r in start..end {
            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                *a += f64::from(*v);
            }
        }
        let count = (end - start) as f64;
        for (o, a) in out.row_mut(g).iter_mut().zip(&acc) {
            *o = (a / count) as f32;
        }
    }
    Ok(out)
}

/// Inverse layout of [`mean_pool_blocks`]: repeats each row `pool` times, truncated to `rows`.
pub fn replicate_rows(x: &Matrix, pool: usize, rows: usize) -> Matrix {
    Matrix::from_fn(rows, x.cols, |i, j| x.get(i / pool, j))
}
