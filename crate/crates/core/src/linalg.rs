//! Dense row-major matrices and the few factorizations the GP needs.
//!
//! Storage is a plain `Vec<f64>`; products and Cholesky factorizations are
//! delegated to `faer` through zero-copy strided views.

use faer::linalg::matmul::matmul as faer_matmul;
use faer::linalg::solvers::DenseSolveCore;
use faer::{Accum, MatMut, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};

/// Diagonal jitter added before the first factorization attempt.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up on a factorization.
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Value of a 1×1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row slice out of range");
        Self::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column slice out of range");
        Self::from_fn(self.rows, len, |i, j| self[(i, start + j)])
    }

    pub(crate) fn view(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub(crate) fn view_mut(&mut self) -> MatMut<'_, f64> {
        MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    /// `op(self) · op(rhs)` where `op` optionally transposes.
    pub fn matmul_t(&self, transpose_self: bool, rhs: &Self, transpose_rhs: bool) -> Self {
        let a = if transpose_self {
            self.view().transpose()
        } else {
            self.view()
        };
        let b = if transpose_rhs {
            rhs.view().transpose()
        } else {
            rhs.view()
        };
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul inner dimension mismatch: {:?}{} x {:?}{}",
            self.shape(),
            if transpose_self { "ᵀ" } else { "" },
            rhs.shape(),
            if transpose_rhs { "ᵀ" } else { "" }
        );
        let mut out = Self::zeros(a.nrows(), b.ncols());
        if a.ncols() == 0 {
            return out;
        }
        faer_matmul(out.view_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        self.matmul_t(false, rhs, false)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec length mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct SpdInverse {
    pub inverse: Matrix,
    pub logdet: f64,
    /// Diagonal jitter that was actually added before factorizing.
    pub jitter: f64,
}

/// Cholesky-based inverse of `a + jitter·I`. The jitter starts at zero, then
/// escalates by 10× from [`JITTER_START`] up to [`JITTER_MAX`] until the
/// factorization succeeds.
pub fn spd_inverse(a: &Matrix) -> Result<SpdInverse> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "spd_inverse needs a square matrix");
    if !a.is_finite() {
        return Err(DgmError::Conditioning {
            size: n,
            jitter: 0.0,
            reason: "non-finite entries".into(),
        });
    }
    let mut jitter = 0.0;
    loop {
        let mut m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Ok(llt) = m.llt(Side::Lower) {
            let l = llt.L();
            let mut logdet = 0.0;
            for i in 0..n {
                logdet += l[(i, i)].ln();
            }
            let inv = llt.inverse();
            let inverse = Matrix::from_fn(n, n, |i, j| inv[(i, j)]);
            return Ok(SpdInverse {
                inverse,
                logdet: 2.0 * logdet,
                jitter,
            });
        }
        if jitter >= JITTER_MAX {
            return Err(DgmError::Conditioning {
                size: n,
                jitter,
                reason: "Cholesky factorization failed".into(),
            });
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            (jitter * 10.0).min(JITTER_MAX)
        };
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (dense, used by oracles
/// and the low-rank solver).
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let inv = spd_inverse(a)?;
    Ok(inv.inverse.matmul(b))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    m.self_adjoint_eigenvalues(Side::Lower)
        .expect("symmetric eigenvalue decomposition failed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_transposes() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab, Matrix::from_rows(&[vec![4.0, 5.0], vec![10.0, 11.0]]));
        let aat = a.matmul_t(false, &a, true);
        assert_eq!(aat, Matrix::from_rows(&[vec![14.0, 32.0], vec![32.0, 77.0]]));
        let ata = a.matmul_t(true, &a, false);
        assert_eq!(ata[(0, 0)], 17.0);
        assert_eq!(ata[(2, 1)], 3.0 * 2.0 + 6.0 * 5.0);
    }

    #[test]
    fn spd_inverse_of_known_matrix() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let inv = spd_inverse(&a).unwrap();
        let prod = a.matmul(&inv.inverse);
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - expected).abs() < 1e-7);
            }
        }
        assert!((inv.logdet - 8.0_f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn jitter_escalates_on_singular_input() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let inv = spd_inverse(&a).unwrap();
        assert!(inv.jitter >= JITTER_START);
        let neg = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            spd_inverse(&neg),
            Err(DgmError::Conditioning { .. })
        ));
    }
}
