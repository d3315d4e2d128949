//! Cholesky-based linear algebra helpers.
//!
//! All inverses in this crate are expressed as triangular solves against a
//! cached factor; an explicit matrix inverse is never formed.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Diagonal repair ladder tried in order when a factorization fails.
/// Each rung is scaled by the mean diagonal of the matrix being factored.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Cached Cholesky factor of a symmetric positive-definite matrix, together
/// with the diagonal jitter (absolute, already scaled) that was needed to
/// obtain it.
#[derive(Clone, Debug)]
pub struct CholeskyFactor<T: Scalar> {
    chol: Cholesky<T, Dyn>,
    jitter: T,
}

impl<T: Scalar> CholeskyFactor<T> {
    /// Factors `matrix`, walking the jitter ladder on failure. Returns the
    /// (possibly repaired) matrix alongside its factor so callers can keep
    /// the two consistent.
    pub fn decompose(matrix: DMatrix<T>, what: &str) -> Result<(DMatrix<T>, Self)> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "{what} must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let mean_diag = matrix.diagonal().iter().copied().sum::<T>() / T::from_count(n);
        let scale = if mean_diag > T::zero() { mean_diag } else { T::one() };
        for rung in JITTER_LADDER {
            let jitter = scale * T::from_f64_c(rung);
            let mut candidate = matrix.clone();
            if rung > 0.0 {
                for i in 0..n {
                    candidate[(i, i)] += jitter;
                }
            }
            if let Some(chol) = Cholesky::new(candidate.clone()) {
                return Ok((candidate, Self { chol, jitter }));
            }
        }
        Err(Error::NotPositiveDefinite {
            what: what.to_string(),
            max_jitter: (scale * T::from_f64_c(*JITTER_LADDER.last().unwrap()))
                .to_f64()
                .unwrap_or(f64::NAN),
        })
    }

    /// Absolute diagonal addition that was applied (zero when the matrix
    /// factored as given).
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// `A^-1 B` via two triangular solves.
    pub fn solve_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    /// `A^-1 b` via two triangular solves.
    pub fn solve_vector(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    /// `log |A|` from the factor diagonal.
    pub fn log_det(&self) -> T {
        let two = T::from_f64_c(2.0);
        let mut acc = T::zero();
        let l = self.chol.l_dirty();
        for i in 0..l.nrows() {
            acc += l[(i, i)].ln();
        }
        two * acc
    }

    /// Quadratic form `r' A^-1 r`.
    pub fn quad_form(&self, r: &DVector<T>) -> T {
        r.dot(&self.solve_vector(r))
    }

    /// Lower-triangular factor `L` with `A = L L'` (used for sampling).
    pub fn lower(&self) -> DMatrix<T> {
        self.chol.l()
    }

    /// Dimension of the factored matrix.
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// `tr(M)`.
pub fn trace<T: Scalar>(m: &DMatrix<T>) -> T {
    m.diagonal().iter().copied().sum()
}

/// `tr(A B)` without materializing the product: `sum_ij A_ij B_ji`.
pub fn trace_prod<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    assert_eq!(a.ncols(), b.nrows(), "trace_prod: inner dimensions");
    assert_eq!(a.nrows(), b.ncols(), "trace_prod: outer dimensions");
    let mut acc = T::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `sum_ij A_ij B_ij`, i.e. `tr(A B')` for same-shaped matrices.
pub fn dot_elem<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "dot_elem: shapes must match");
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

/// Largest absolute entry.
pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Replaces `m` with `(m + m') / 2`.
pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = T::from_f64_c(0.5);
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let eig = m.clone().symmetric_eigenvalues();
    eig.iter().copied().reduce(|a, b| a.min(b)).unwrap_or_else(T::zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn factor_and_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (stored, f) = CholeskyFactor::decompose(m.clone(), "test matrix").unwrap();
        assert_eq!(stored, m);
        assert_eq!(f.jitter(), 0.0);
        let b = DVector::from_column_slice(&[1.0, 1.0]);
        let x = f.solve_vector(&b);
        // [2 1; 1 2] x = (1,1)' has solution (1/3, 1/3)'
        assert_relative_eq!(x[0], 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(f.log_det(), 3.0f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(f.quad_form(&b), 2.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn jitter_repairs_a_semidefinite_matrix() {
        // Rank-one, exactly singular: needs a nonzero rung.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (stored, f) = CholeskyFactor::decompose(m, "test matrix").unwrap();
        assert!(f.jitter() > 0.0);
        assert_relative_eq!(stored[(0, 0)], 1.0 + f.jitter());
    }

    #[test]
    fn zero_matrix_uses_absolute_jitter_scale() {
        let m = DMatrix::<f64>::zeros(2, 2);
        let (stored, f) = CholeskyFactor::decompose(m, "test matrix").unwrap();
        assert!(f.jitter() > 0.0);
        assert_eq!(stored[(0, 0)], f.jitter());
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        let err = CholeskyFactor::decompose(m, "test matrix").unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn trace_helpers_agree_with_dense_products() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 1.0, 2.0, 0.0]);
        assert_relative_eq!(trace_prod(&a, &b), trace(&(&a * &b)));
        assert_relative_eq!(dot_elem(&a, &a), 91.0);
    }

    #[test]
    fn min_eigenvalue_of_diag() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, -1.0]);
        assert_relative_eq!(min_symmetric_eigenvalue(&m), -1.0, max_relative = 1e-12);
    }
}
