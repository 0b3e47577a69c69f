//! Dense row-major linear algebra and numerically stable primitives.
//!
//! Everything here is `f64` and deterministic: reductions run in a fixed
//! left-to-right order so repeated runs produce bit-identical results.

mod rng;

pub use rng::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which a vector is considered degenerate for
/// normalization purposes.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense row-major matrix of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. The data length must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has length {} but row 0 has length {ncols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `a * b`. Each output entry is accumulated left to right
/// over the shared dimension, so the summation order is fixed.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Matrix-vector product `m * v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::Shape {
            op: "matvec",
            lhs_rows: m.rows,
            lhs_cols: m.cols,
            rhs_rows: v.len(),
            rhs_cols: 1,
        });
    }
    Ok((0..m.rows).map(|i| dot(m.row(i), v)).collect())
}

/// Transposed matrix-vector product `m^T * v`.
pub fn matvec_t(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.rows != v.len() {
        return Err(Error::Shape {
            op: "matvec_t",
            lhs_rows: m.cols,
            lhs_cols: m.rows,
            rhs_rows: v.len(),
            rhs_cols: 1,
        });
    }
    let mut out = vec![0.0; m.cols];
    for i in 0..m.rows {
        let row = m.row(i);
        let vi = v[i];
        for (o, r) in out.iter_mut().zip(row) {
            *o += vi * r;
        }
    }
    Ok(out)
}

/// Dot product with fixed left-to-right accumulation.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += alpha * x`, elementwise.
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Softmax of `scores / temperature` with max subtraction.
///
/// The maximum score is subtracted before exponentiation; at small
/// temperatures the raw exponents would overflow otherwise.
pub fn stable_softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "softmax of an empty score vector".into(),
        ));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax input contains non-finite score {bad}"
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// Cosine similarity `a . b / (|a| |b|)`.
///
/// Errors if either operand's norm is at or below [`NORM_FLOOR`]; callers are
/// expected to handle degenerate vectors explicitly rather than receive a
/// silently clamped value.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op: "cosine",
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    let na = norm(a);
    if na <= NORM_FLOOR {
        return Err(Error::DegenerateVector {
            norm: na,
            floor: NORM_FLOOR,
        });
    }
    let nb = norm(b);
    if nb <= NORM_FLOOR {
        return Err(Error::DegenerateVector {
            norm: nb,
            floor: NORM_FLOOR,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `n` i.i.d. Gaussian draws. A zero standard deviation returns the constant
/// mean vector without consuming generator state.
pub fn gaussian(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian requires finite mean and std >= 0, got mean {mean}, std {std}"
        )));
    }
    if std == 0.0 {
        return Ok(vec![mean; n]);
    }
    Ok((0..n).map(|_| rng.normal(mean, std)).collect())
}

#[cfg(test)]
mod tests;
