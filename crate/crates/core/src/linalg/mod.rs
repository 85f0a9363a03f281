//! Dense real-matrix arithmetic plus the exact and randomized SVD routines.
//!
//! `DenseMatrix` is the universal carrier for weights, gradients, and adapter
//! factors. Reductions (inner products, variances) use compensated summation
//! so the identities checked downstream hold to ~1e-12 even on large inputs.

mod svd;

pub use svd::{principal_angle_sines, svd, SvdConfig, SvdMode, SvdResult};

use crate::error::{Result, SliceError};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of finite doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    /// Build a matrix, validating the entry count and finiteness.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(SliceError::BadEntryCount {
                rows,
                cols,
                expected: rows * cols,
                got: entries.len(),
            });
        }
        let m = DenseMatrix { rows, cols, entries };
        m.check_finite()?;
        Ok(m)
    }

    /// Internal constructor for entries already known to be finite.
    pub(crate) fn from_parts(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), rows * cols);
        DenseMatrix { rows, cols, entries }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries[row * self.cols + col] = value;
    }

    pub fn check_finite(&self) -> Result<()> {
        for (idx, v) in self.entries.iter().enumerate() {
            if !v.is_finite() {
                return Err(SliceError::NonFiniteEntry {
                    row: idx / self.cols,
                    col: idx % self.cols,
                    rows: self.rows,
                    cols: self.cols,
                });
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.entries[j * self.rows + i] = self.entries[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.require_same_shape(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix::from_parts(self.rows, self.cols, entries))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.require_same_shape(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix::from_parts(self.rows, self.cols, entries))
    }

    /// `self - factor * other`, the workhorse of the projection step.
    pub fn sub_scaled(&self, factor: f64, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.require_same_shape(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - factor * b)
            .collect();
        Ok(DenseMatrix::from_parts(self.rows, self.cols, entries))
    }

    /// Columns `lo..hi` as a new matrix.
    pub fn columns(&self, lo: usize, hi: usize) -> DenseMatrix {
        debug_assert!(lo < hi && hi <= self.cols);
        let mut out = DenseMatrix::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            for (k, j) in (lo..hi).enumerate() {
                out.entries[i * (hi - lo) + k] = self.entries[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    fn require_same_shape(&self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SliceError::ShapeMismatch {
                expected_rows: self.rows,
                expected_cols: self.cols,
                got_rows: other.rows,
                got_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Standard matrix product.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(SliceError::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let a_row = &a.entries[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.entries[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix::from_parts(a.rows, b.cols, out))
}

/// Matrix-vector product.
pub fn matvec(a: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(SliceError::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: x.len(),
            right_cols: 1,
        });
    }
    let mut out = vec![0.0; a.rows];
    for i in 0..a.rows {
        let row = &a.entries[i * a.cols..(i + 1) * a.cols];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// Compensated (Kahan-Babuska) summation.
pub(crate) fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Frobenius inner product `Σᵢⱼ aᵢⱼ·bᵢⱼ`.
pub fn frobenius_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SliceError::ShapeMismatch {
            expected_rows: a.rows,
            expected_cols: a.cols,
            got_rows: b.rows,
            got_cols: b.cols,
        });
    }
    Ok(kahan_sum(
        a.entries.iter().zip(&b.entries).map(|(x, y)| x * y),
    ))
}

/// Squared Frobenius norm, computed through the same accumulation path as
/// `frobenius_inner` so `frobenius_inner(a, a) == frobenius_norm_sq(a)` holds
/// bit-exactly.
pub fn frobenius_norm_sq(a: &DenseMatrix) -> f64 {
    kahan_sum(a.entries.iter().map(|x| x * x))
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    frobenius_norm_sq(a).sqrt()
}

/// Population variance of all entries (divisor = entry count).
pub fn entrywise_variance(m: &DenseMatrix) -> Result<f64> {
    let n = m.entries.len();
    if n < 2 {
        return Err(SliceError::Degenerate(format!(
            "variance of a {}x{} matrix with {} entry is undefined",
            m.rows, m.cols, n
        )));
    }
    let mean = kahan_sum(m.entries.iter().copied()) / n as f64;
    let var = kahan_sum(m.entries.iter().map(|v| {
        let d = v - mean;
        d * d
    })) / n as f64;
    Ok(var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, e: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, e.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = matmul(&DenseMatrix::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.entries(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = matmul(&a, &DenseMatrix::zeros(2, 3)).unwrap();
        assert!(out.entries().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = m(2, 3, &[0.0; 6]);
        let b = m(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn inner_of_self_is_norm_sq_bitwise() {
        let a = m(2, 3, &[0.3, -1.7, 2.2, 9.1, -0.01, 5.5]);
        assert_eq!(frobenius_inner(&a, &a).unwrap(), frobenius_norm_sq(&a));
    }

    #[test]
    fn inner_disjoint_support_is_zero() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = m(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(frobenius_inner(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn inner_hand_example() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert_eq!(frobenius_inner(&a, &b).unwrap(), -5.0);
    }

    #[test]
    fn inner_rejects_shape_mismatch() {
        let a = m(2, 2, &[0.0; 4]);
        let b = m(1, 4, &[0.0; 4]);
        assert!(frobenius_inner(&a, &b).is_err());
    }

    #[test]
    fn variance_constant_matrix_is_zero() {
        let a = m(3, 3, &[4.2; 9]);
        assert_eq!(entrywise_variance(&a).unwrap(), 0.0);
    }

    #[test]
    fn variance_hand_examples() {
        let a = m(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        assert_relative_eq!(entrywise_variance(&a).unwrap(), 1.0);
        let b = m(1, 2, &[0.0, 2.0]);
        assert_relative_eq!(entrywise_variance(&b).unwrap(), 1.0);
    }

    #[test]
    fn variance_rejects_single_entry() {
        let a = m(1, 1, &[3.0]);
        assert!(matches!(
            entrywise_variance(&a),
            Err(SliceError::Degenerate(_))
        ));
    }

    #[test]
    fn constructor_rejects_non_finite() {
        let err = DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, SliceError::NonFiniteEntry { col: 1, .. }));
    }

    #[test]
    fn constructor_rejects_bad_count() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn kahan_sum_large_cancellation() {
        // 1e16 + many small values that a naive sum would drop entirely.
        let mut values = vec![1e16];
        values.extend(std::iter::repeat(1.0).take(1000));
        values.push(-1e16);
        assert_eq!(kahan_sum(values.into_iter()), 1000.0);
    }
}
