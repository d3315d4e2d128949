//! Generalized least squares and the linear-predictor hat matrices.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor};
use crate::model::{CovarianceBundle, DesignData};
use crate::scalar::Scalar;

/// Relative rank tolerance for the weighted cross-product `X'V^-1 X`.
pub const RANK_TOL: f64 = 1e-10;

/// GLS point estimate and its covariance.
#[derive(Clone, Debug)]
pub struct GlsEstimate<T: Scalar> {
    pub beta_hat: DVector<T>,
    pub var_beta_hat: DMatrix<T>,
}

/// Factored weighted normal equations shared by `gls_fit` and `hat_matrices`.
struct NormalEquations<T: Scalar> {
    /// `V^-1 X`, n x p.
    vinv_x: DMatrix<T>,
    chol: Cholesky<T, nalgebra::Dyn>,
}

fn normal_equations<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
) -> Result<NormalEquations<T>> {
    if bundle.n() != data.n() || bundle.n_star() != data.n_star() {
        return Err(Error::DimensionMismatch(format!(
            "bundle is {}x{} rows but the design is {}x{}",
            bundle.n(),
            bundle.n_star(),
            data.n(),
            data.n_star()
        )));
    }
    let vinv_x = bundle.chol_v.solve_matrix(data.x());
    let mut m = data.x().tr_mul(&vinv_x);
    linalg::symmetrize(&mut m);
    let eig = m.clone().symmetric_eigenvalues();
    let max_eig = eig.iter().copied().fold(T::zero(), T::max);
    let min_eig = eig.iter().copied().reduce(|a, b| a.min(b)).unwrap_or_else(T::zero);
    let tol = T::from_f64_c(RANK_TOL);
    if max_eig <= T::zero() || min_eig < tol * max_eig {
        let ratio = if max_eig > T::zero() { min_eig / max_eig } else { T::zero() };
        return Err(Error::SingularDesign {
            ratio: ratio.to_f64().unwrap_or(f64::NAN),
            tol: RANK_TOL,
        });
    }
    let chol = Cholesky::new(m).ok_or(Error::SingularDesign { ratio: 0.0, tol: RANK_TOL })?;
    Ok(NormalEquations { vinv_x, chol })
}

/// Fits `beta_hat = (X'V^-1 X)^-1 X'V^-1 y` with `Var(beta_hat) = (X'V^-1 X)^-1`.
pub fn gls_fit<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
) -> Result<GlsEstimate<T>> {
    let ne = normal_equations(data, bundle)?;
    let beta_hat = ne.chol.solve(&ne.vinv_x.tr_mul(data.y()));
    let mut var_beta_hat = ne.chol.solve(&DMatrix::identity(data.p(), data.p()));
    linalg::symmetrize(&mut var_beta_hat);
    Ok(GlsEstimate { beta_hat, var_beta_hat })
}

/// Hat matrices of the plug-in best linear predictor:
///
/// `H  = XA + (V - R) V^-1 (I - XA)`
/// `H* = X*A + C V^-1 (I - XA)` with `A = (X'V^-1 X)^-1 X'V^-1`,
///
/// so that `f_hat = H y` and `f_star_hat = H* y`.
#[derive(Clone, Debug)]
pub struct HatPair<T: Scalar> {
    pub h: DMatrix<T>,
    pub h_star: DMatrix<T>,
    pub f_hat: DVector<T>,
    pub f_star_hat: DVector<T>,
    bias_defect: T,
}

impl<T: Scalar> HatPair<T> {
    /// Wraps raw hat matrices, recording how far they are from reproducing
    /// the fixed-effect designs (`max |HX - X|, |H*X - X*|`). Deliberately
    /// biased predictors get an honest defect this way.
    pub fn from_matrices(h: DMatrix<T>, h_star: DMatrix<T>, data: &DesignData<T>) -> Result<Self> {
        let (n, n_star) = (data.n(), data.n_star());
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "H is {}x{} but must be {n}x{n}",
                h.nrows(),
                h.ncols()
            )));
        }
        if h_star.nrows() != n_star || h_star.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "H* is {}x{} but must be {n_star}x{n}",
                h_star.nrows(),
                h_star.ncols()
            )));
        }
        let f_hat = &h * data.y();
        let f_star_hat = &h_star * data.y();
        let defect_train = linalg::max_abs(&(&h * data.x() - data.x()));
        let defect_pred = linalg::max_abs(&(&h_star * data.x() - data.x_star()));
        Ok(Self { h, h_star, f_hat, f_star_hat, bias_defect: defect_train.max(defect_pred) })
    }

    /// `max(|HX - X|, |H*X - X*|)` — zero (to rounding) for the BLUP.
    pub fn bias_defect(&self) -> T {
        self.bias_defect
    }
}

/// Builds the hat pair for a design and realized covariance.
pub fn hat_matrices<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
) -> Result<HatPair<T>> {
    let ne = normal_equations(data, bundle)?;
    // A = (X'V^-1 X)^-1 (V^-1 X)'.
    let a = ne.chol.solve(&ne.vinv_x.transpose());
    let p_mat = data.x() * &a;
    let s = DMatrix::identity(data.n(), data.n()) - &p_mat;
    let vinv_s = bundle.chol_v.solve_matrix(&s);
    let h = &p_mat + (&bundle.v - &bundle.r) * &vinv_s;
    let h_star = data.x_star() * &a + &bundle.c * &vinv_s;
    HatPair::from_matrices(h, h_star, data)
}

/// Shared plumbing for consumers that need `V^-1 X` and the factored
/// cross-product (the GLS-only criterion shortcut).
pub(crate) fn weighted_cross_product<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
) -> Result<DMatrix<T>> {
    let ne = normal_equations(data, bundle)?;
    let mut m = data.x().tr_mul(&ne.vinv_x);
    linalg::symmetrize(&mut m);
    Ok(m)
}

/// Cholesky factor of an arbitrary SPD matrix for prediction-side reuse.
pub(crate) fn plain_factor<T: Scalar>(m: DMatrix<T>, what: &str) -> Result<CholeskyFactor<T>> {
    CholeskyFactor::decompose(m, what).map(|(_, f)| f)
}
