//! Model inputs: training/prediction designs and the realized covariance
//! structure (V, V*, C, R, R*) they induce.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor};
use crate::scalar::Scalar;

/// Relative tolerance used when checking user-supplied matrices for symmetry
/// and the joint training/prediction covariance for positive semidefiniteness.
pub const PSD_TOL: f64 = 1e-8;

/// Eigenvalues of G in `[-G_EIGENVALUE_TOL, 0)` are clamped to zero;
/// anything below is rejected.
pub const G_EIGENVALUE_TOL: f64 = 1e-10;

/// Training and prediction designs for one candidate model.
///
/// `y` is the observed training response; `y_star` is the held-out response
/// when it is known (simulation, holdout evaluation) and `None` when the
/// prediction points are genuinely unobserved.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignData<T: Scalar> {
    y: DVector<T>,
    x: DMatrix<T>,
    z: DMatrix<T>,
    x_star: DMatrix<T>,
    z_star: DMatrix<T>,
    y_star: Option<DVector<T>>,
}

impl<T: Scalar> DesignData<T> {
    pub fn new(
        y: DVector<T>,
        x: DMatrix<T>,
        z: DMatrix<T>,
        x_star: DMatrix<T>,
        z_star: DMatrix<T>,
        y_star: Option<DVector<T>>,
    ) -> Result<Self> {
        let n = y.len();
        let n_star = x_star.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("training set is empty".into()));
        }
        if n_star == 0 {
            return Err(Error::InvalidParameter("prediction set is empty".into()));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows and Z has {} rows but y has length {n}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidParameter("X has no columns".into()));
        }
        if x_star.ncols() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "X* has {} columns but X has {}",
                x_star.ncols(),
                x.ncols()
            )));
        }
        if z_star.nrows() != n_star || z_star.ncols() != z.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "Z* is {}x{} but expected {}x{}",
                z_star.nrows(),
                z_star.ncols(),
                n_star,
                z.ncols()
            )));
        }
        if let Some(ys) = &y_star {
            if ys.len() != n_star {
                return Err(Error::DimensionMismatch(format!(
                    "y* has length {} but the prediction design has {} rows",
                    ys.len(),
                    n_star
                )));
            }
        }
        Ok(Self { y, x, z, x_star, z_star, y_star })
    }

    /// Design with no random-effect columns (pure GLS regression).
    pub fn without_random_effects(
        y: DVector<T>,
        x: DMatrix<T>,
        x_star: DMatrix<T>,
        y_star: Option<DVector<T>>,
    ) -> Result<Self> {
        let n = y.len();
        let n_star = x_star.nrows();
        let z = DMatrix::zeros(n, 0);
        let z_star = DMatrix::zeros(n_star, 0);
        Self::new(y, x, z, x_star, z_star, y_star)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_star(&self) -> usize {
        self.x_star.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<T> {
        &self.z
    }

    pub fn x_star(&self) -> &DMatrix<T> {
        &self.x_star
    }

    pub fn z_star(&self) -> &DMatrix<T> {
        &self.z_star
    }

    pub fn y_star(&self) -> Option<&DVector<T>> {
        self.y_star.as_ref()
    }

    /// Same rows, but keeping only the given fixed-effect columns (nested
    /// candidate models share everything except X).
    pub fn with_fixed_columns(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter("no fixed-effect columns selected".into()));
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.p()) {
            return Err(Error::DimensionMismatch(format!(
                "fixed-effect column {bad} out of range (X has {} columns)",
                self.p()
            )));
        }
        Ok(Self {
            y: self.y.clone(),
            x: self.x.select_columns(columns.iter()),
            z: self.z.clone(),
            x_star: self.x_star.select_columns(columns.iter()),
            z_star: self.z_star.clone(),
            y_star: self.y_star.clone(),
        })
    }

    /// Same design with a different training response (the penalties must not
    /// depend on y; tests exploit this).
    pub fn with_response(&self, y: DVector<T>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "replacement y has length {} but the design has {} training rows",
                y.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }
}

/// Covariance kernel for Gaussian-process regression.
#[derive(Clone, Debug)]
pub enum KernelSpec<T: Scalar> {
    /// `k(a, b) = sigma_f2 * exp(-1/2 * sum_d ((a_d - b_d) / l_d)^2)`
    /// with one length scale per coordinate.
    SquaredExponential { sigma_f2: T, length_scales: DVector<T> },
}

impl<T: Scalar> KernelSpec<T> {
    fn validate(&self, coord_dim: usize) -> Result<()> {
        match self {
            KernelSpec::SquaredExponential { sigma_f2, length_scales } => {
                if *sigma_f2 <= T::zero() {
                    return Err(Error::InvalidParameter("kernel variance sigma_f2 must be positive".into()));
                }
                if length_scales.len() != coord_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "{} length scales for {} coordinate columns",
                        length_scales.len(),
                        coord_dim
                    )));
                }
                if length_scales.iter().any(|l| *l <= T::zero()) {
                    return Err(Error::InvalidParameter("length scales must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Cross-covariance matrix `K(A, B)` with rows of `a` and `b` as points.
pub fn kernel_matrix<T: Scalar>(
    kernel: &KernelSpec<T>,
    a: &DMatrix<T>,
    b: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs have {} and {} coordinate columns",
            a.ncols(),
            b.ncols()
        )));
    }
    kernel.validate(a.ncols())?;
    match kernel {
        KernelSpec::SquaredExponential { sigma_f2, length_scales } => {
            let half = T::from_f64_c(0.5);
            let mut k = DMatrix::zeros(a.nrows(), b.nrows());
            for i in 0..a.nrows() {
                for j in 0..b.nrows() {
                    let mut d2 = T::zero();
                    for c in 0..a.ncols() {
                        let scaled = (a[(i, c)] - b[(j, c)]) / length_scales[c];
                        d2 += scaled * scaled;
                    }
                    k[(i, j)] = *sigma_f2 * (-half * d2).exp();
                }
            }
            Ok(k)
        }
    }
}

/// Covariance structure of the model, before it is realized against a design.
#[derive(Clone, Debug)]
pub enum CovarianceSpec<T: Scalar> {
    /// Linear mixed model: `V = Z G Z' + sigma2 I`.
    Lmm { g: DMatrix<T>, sigma2: T },
    /// Mixed model with per-observation residual weights:
    /// `V = Z G Z' + diag(sigma2 / w_i)`.
    WeightedLmm { g: DMatrix<T>, sigma2: T, weights: DVector<T>, weights_star: DVector<T> },
    /// Gaussian-process regression: `V = K(Z, Z) + sigma2 I` with the rows of
    /// Z as coordinates.
    Gpr { kernel: KernelSpec<T>, sigma2: T },
    /// Fully explicit covariances; `c` is `Cov(y*, y)` and may be zero.
    Gls { v: DMatrix<T>, v_star: DMatrix<T>, c: DMatrix<T> },
}

/// How the residual covariances R and R* are derived from the model.
///
/// `Residual` treats a fresh copy of the data as sharing the random effects
/// with the training response, so R is the residual block and
/// `Cov(y_new, y) = V - R` by construction. `GaussianConditional` takes the
/// literal conditional variances instead.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    #[default]
    Residual,
    GaussianConditional,
}

/// Realized covariance structure for one design, with cached factors.
#[derive(Clone, Debug)]
pub struct CovarianceBundle<T: Scalar> {
    pub v: DMatrix<T>,
    pub v_star: DMatrix<T>,
    /// `Cov(y*, y)`, n* x n.
    pub c: DMatrix<T>,
    pub r: DMatrix<T>,
    pub r_star: DMatrix<T>,
    pub chol_v: CholeskyFactor<T>,
    pub chol_r: CholeskyFactor<T>,
    pub chol_r_star: CholeskyFactor<T>,
    /// Largest diagonal repair applied across the three factorizations
    /// (zero when everything factored as given).
    pub jitter_applied: T,
}

impl<T: Scalar> CovarianceBundle<T> {
    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_star(&self) -> usize {
        self.v_star.nrows()
    }
}

/// Validates G (symmetry, eigenvalue clamp) and returns a usable copy.
fn clean_g<T: Scalar>(g: &DMatrix<T>, q: usize) -> Result<DMatrix<T>> {
    if g.nrows() != q || g.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "G is {}x{} but Z has {} columns",
            g.nrows(),
            g.ncols(),
            q
        )));
    }
    if q == 0 {
        return Ok(g.clone());
    }
    let scale = T::one() + linalg::max_abs(g);
    let asym = linalg::max_abs(&(g - g.transpose()));
    if asym > T::from_f64_c(PSD_TOL) * scale {
        return Err(Error::InvalidParameter(
            "random-effect covariance G is not symmetric".into(),
        ));
    }
    let mut sym = g.clone();
    linalg::symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let tol = T::from_f64_c(G_EIGENVALUE_TOL);
    let mut clamped = false;
    let mut eigenvalues = eig.eigenvalues.clone();
    for lambda in eigenvalues.iter_mut() {
        if *lambda < -tol {
            return Err(Error::InvalidParameter(format!(
                "random-effect covariance G has eigenvalue {:e}, below -{G_EIGENVALUE_TOL:e}",
                lambda.to_f64().unwrap_or(f64::NAN)
            )));
        }
        if *lambda < T::zero() {
            *lambda = T::zero();
            clamped = true;
        }
    }
    if clamped {
        // Rebuild G from the clamped spectrum; otherwise return the input
        // untouched so exact values flow through.
        let q_mat = eig.eigenvectors;
        let mut rebuilt = &q_mat * DMatrix::from_diagonal(&eigenvalues) * q_mat.transpose();
        linalg::symmetrize(&mut rebuilt);
        Ok(rebuilt)
    } else {
        Ok(sym)
    }
}

/// Builds `cross + diag(resid)` without disturbing the off-diagonal entries.
fn assemble<T: Scalar>(mut cross: DMatrix<T>, resid: &DVector<T>) -> DMatrix<T> {
    for i in 0..cross.nrows() {
        cross[(i, i)] += resid[i];
    }
    cross
}

struct RawCovariances<T: Scalar> {
    v: DMatrix<T>,
    v_star: DMatrix<T>,
    c: DMatrix<T>,
    resid: DVector<T>,
    resid_star: DVector<T>,
    /// Explicit GLS models have no residual decomposition; R defaults to V.
    gls: bool,
}

fn build_raw<T: Scalar>(spec: &CovarianceSpec<T>, data: &DesignData<T>) -> Result<RawCovariances<T>> {
    let n = data.n();
    let n_star = data.n_star();
    match spec {
        CovarianceSpec::Lmm { g, sigma2 } | CovarianceSpec::WeightedLmm { g, sigma2, .. } => {
            if *sigma2 <= T::zero() {
                return Err(Error::InvalidParameter("residual variance sigma2 must be positive".into()));
            }
            let (resid, resid_star) = match spec {
                CovarianceSpec::WeightedLmm { weights, weights_star, .. } => {
                    if weights.len() != n || weights_star.len() != n_star {
                        return Err(Error::DimensionMismatch(format!(
                            "weights have lengths {} and {} but the design is {}/{}",
                            weights.len(),
                            weights_star.len(),
                            n,
                            n_star
                        )));
                    }
                    if weights.iter().chain(weights_star.iter()).any(|w| *w <= T::zero()) {
                        return Err(Error::InvalidParameter("residual weights must be positive".into()));
                    }
                    (weights.map(|w| *sigma2 / w), weights_star.map(|w| *sigma2 / w))
                }
                _ => (
                    DVector::from_element(n, *sigma2),
                    DVector::from_element(n_star, *sigma2),
                ),
            };
            let g = clean_g(g, data.q())?;
            let zg = data.z() * &g;
            let mut cross = &zg * data.z().transpose();
            linalg::symmetrize(&mut cross);
            let zsg = data.z_star() * &g;
            let mut cross_star = &zsg * data.z_star().transpose();
            linalg::symmetrize(&mut cross_star);
            let c = &zsg * data.z().transpose();
            Ok(RawCovariances {
                v: assemble(cross, &resid),
                v_star: assemble(cross_star, &resid_star),
                c,
                resid,
                resid_star,
                gls: false,
            })
        }
        CovarianceSpec::Gpr { kernel, sigma2 } => {
            // The kernel may already be strictly positive definite, so a zero
            // nugget is allowed here (the factorization repairs R if needed).
            if *sigma2 < T::zero() {
                return Err(Error::InvalidParameter("noise variance sigma2 must be non-negative".into()));
            }
            let cross = kernel_matrix(kernel, data.z(), data.z())?;
            let cross_star = kernel_matrix(kernel, data.z_star(), data.z_star())?;
            let c = kernel_matrix(kernel, data.z_star(), data.z())?;
            let resid = DVector::from_element(n, *sigma2);
            let resid_star = DVector::from_element(n_star, *sigma2);
            Ok(RawCovariances {
                v: assemble(cross, &resid),
                v_star: assemble(cross_star, &resid_star),
                c,
                resid,
                resid_star,
                gls: false,
            })
        }
        CovarianceSpec::Gls { v, v_star, c } => {
            if v.nrows() != n || v.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "V is {}x{} but the training set has {n} rows",
                    v.nrows(),
                    v.ncols()
                )));
            }
            if v_star.nrows() != n_star || v_star.ncols() != n_star {
                return Err(Error::DimensionMismatch(format!(
                    "V* is {}x{} but the prediction set has {n_star} rows",
                    v_star.nrows(),
                    v_star.ncols()
                )));
            }
            if c.nrows() != n_star || c.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "C is {}x{} but Cov(y*, y) must be {n_star}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            let tol = T::from_f64_c(PSD_TOL);
            for (m, name) in [(v, "V"), (v_star, "V*")] {
                let scale = T::one() + linalg::max_abs(m);
                if linalg::max_abs(&(m - m.transpose())) > tol * scale {
                    return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
                }
            }
            let mut v = v.clone();
            let mut v_star = v_star.clone();
            linalg::symmetrize(&mut v);
            linalg::symmetrize(&mut v_star);
            // User-supplied blocks: make sure [[V, C'], [C, V*]] is a valid
            // joint covariance before anything downstream trusts it.
            let m = n + n_star;
            let mut joint = DMatrix::zeros(m, m);
            joint.view_mut((0, 0), (n, n)).copy_from(&v);
            joint.view_mut((n, n), (n_star, n_star)).copy_from(&v_star);
            joint.view_mut((n, 0), (n_star, n)).copy_from(c);
            joint.view_mut((0, n), (n, n_star)).copy_from(&c.transpose());
            let min_eig = linalg::min_symmetric_eigenvalue(&joint);
            let scale = T::one() + linalg::max_abs(&joint);
            if min_eig < -tol * scale {
                return Err(Error::JointCovarianceNotPsd {
                    min_eig: min_eig.to_f64().unwrap_or(f64::NAN),
                });
            }
            Ok(RawCovariances {
                resid: v.diagonal(),
                resid_star: v_star.diagonal(),
                v,
                v_star,
                c: c.clone(),
                gls: true,
            })
        }
    }
}

/// Realizes a covariance spec against a design: builds V, V*, C and the
/// residual covariances R, R* under the requested mode, factoring everything
/// once.
pub fn realize<T: Scalar>(
    spec: &CovarianceSpec<T>,
    data: &DesignData<T>,
    r_mode: ResidualMode,
) -> Result<CovarianceBundle<T>> {
    let raw = build_raw(spec, data)?;
    let (v, chol_v) = CholeskyFactor::decompose(raw.v, "training covariance V")?;
    let (r, r_star) = match r_mode {
        // A fresh copy of the data shares the random effects: R is the
        // residual block. For an explicit GLS model the whole covariance is
        // residual.
        ResidualMode::Residual if raw.gls => (v.clone(), raw.v_star.clone()),
        ResidualMode::Residual => (
            DMatrix::from_diagonal(&raw.resid),
            DMatrix::from_diagonal(&raw.resid_star),
        ),
        // Literal conditional variances: R* = V* - C V^-1 C' and
        // R = V - B V^-1 B' with B = V minus the residual block.
        ResidualMode::GaussianConditional => {
            let vinv_ct = chol_v.solve_matrix(&raw.c.transpose());
            let mut r_star = &raw.v_star - &raw.c * vinv_ct;
            linalg::symmetrize(&mut r_star);
            let r = if raw.gls {
                // B = V - V = 0, so conditioning changes nothing.
                v.clone()
            } else {
                let b = &v - DMatrix::from_diagonal(&raw.resid);
                let vinv_bt = chol_v.solve_matrix(&b.transpose());
                let mut r = &v - &b * vinv_bt;
                linalg::symmetrize(&mut r);
                r
            };
            (r, r_star)
        }
    };
    let (r, chol_r) = CholeskyFactor::decompose(r, "residual covariance R")?;
    let (r_star, chol_r_star) =
        CholeskyFactor::decompose(r_star, "prediction residual covariance R*")?;
    // Keep V* consistent with R* where the two coincide by definition (a
    // jitter repair must not leave them different).
    let v_star = if raw.gls && r_mode == ResidualMode::Residual {
        r_star.clone()
    } else {
        raw.v_star
    };
    let jitter_applied = chol_v.jitter().max(chol_r.jitter()).max(chol_r_star.jitter());
    Ok(CovarianceBundle {
        v,
        v_star,
        c: raw.c,
        r,
        r_star,
        chol_v,
        chol_r,
        chol_r_star,
        jitter_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn design_2x2() -> DesignData<f64> {
        DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(2, 2),
            None,
        )
        .unwrap()
    }

    #[test]
    fn lmm_with_zero_g_is_white_noise() {
        let data = design_2x2();
        let spec = CovarianceSpec::Lmm { g: DMatrix::zeros(2, 2), sigma2: 1.0 };
        let b = realize(&spec, &data, ResidualMode::Residual).unwrap();
        let eye = DMatrix::identity(2, 2);
        assert_eq!(b.v, eye);
        assert_eq!(b.v_star, eye);
        assert_eq!(b.r, eye);
        assert_eq!(b.r_star, eye);
        assert_eq!(b.c, DMatrix::zeros(2, 2));
        assert_eq!(b.jitter_applied, 0.0);
    }

    #[test]
    fn shared_intercept_covariance() {
        // n = 2, q = 1, Z = (1,1)', G = (g): V = g J + s I, C = (g, g).
        let (g, s) = (0.7, 0.3);
        let data = DesignData::new(
            DVector::from_column_slice(&[0.0, 0.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let spec = CovarianceSpec::Lmm { g: DMatrix::from_element(1, 1, g), sigma2: s };
        let b = realize(&spec, &data, ResidualMode::Residual).unwrap();
        assert_relative_eq!(b.v[(0, 0)], g + s);
        assert_relative_eq!(b.v[(0, 1)], g);
        assert_relative_eq!(b.c[(0, 0)], g);
        assert_relative_eq!(b.c[(0, 1)], g);
        assert_relative_eq!(b.v_star[(0, 0)], g + s);
    }

    #[test]
    fn gpr_covariance_matches_scalar_kernel() {
        // Two 1-D points at 0 and 1, unit kernel variance and length scale,
        // no nugget. Scalar oracle: k = exp(-0.5 * (0 - 1)^2).
        let data = DesignData::new(
            DVector::from_column_slice(&[0.0, 0.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            None,
        )
        .unwrap();
        let spec = CovarianceSpec::Gpr {
            kernel: KernelSpec::SquaredExponential {
                sigma_f2: 1.0,
                length_scales: DVector::from_element(1, 1.0),
            },
            sigma2: 0.0,
        };
        let b = realize(&spec, &data, ResidualMode::Residual).unwrap();
        let oracle = (-0.5f64 * (0.0 - 1.0) * (0.0 - 1.0)).exp();
        assert_relative_eq!(b.v[(0, 1)], oracle, max_relative = 1e-15);
        assert_relative_eq!(b.v[(0, 0)], 1.0);
        // R = 0 with no nugget; the factorization must have repaired it.
        assert!(b.jitter_applied > 0.0);
    }

    #[test]
    fn weighted_residuals_scale_the_diagonal() {
        let data = design_2x2();
        let spec = CovarianceSpec::WeightedLmm {
            g: DMatrix::zeros(2, 2),
            sigma2: 2.0,
            weights: DVector::from_column_slice(&[1.0, 4.0]),
            weights_star: DVector::from_column_slice(&[1.0, 1.0]),
        };
        let b = realize(&spec, &data, ResidualMode::Residual).unwrap();
        assert_eq!(b.r[(0, 0)], 2.0);
        assert_eq!(b.r[(1, 1)], 0.5);
        assert_eq!(b.r[(0, 1)], 0.0);
    }

    #[test]
    fn unit_weights_reproduce_the_unweighted_bundle() {
        let data = design_2x2();
        let g = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.9]);
        let plain = realize(
            &CovarianceSpec::Lmm { g: g.clone(), sigma2: 0.8 },
            &data,
            ResidualMode::Residual,
        )
        .unwrap();
        let weighted = realize(
            &CovarianceSpec::WeightedLmm {
                g,
                sigma2: 0.8,
                weights: DVector::from_element(2, 1.0),
                weights_star: DVector::from_element(2, 1.0),
            },
            &data,
            ResidualMode::Residual,
        )
        .unwrap();
        assert_eq!(plain.v, weighted.v);
        assert_eq!(plain.r, weighted.r);
        assert_eq!(plain.c, weighted.c);
    }

    #[test]
    fn kernel_matrix_examples() {
        let k = KernelSpec::SquaredExponential {
            sigma_f2: 2.0,
            length_scales: DVector::from_element(1, 1.0),
        };
        let a = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let km = kernel_matrix(&k, &a, &a).unwrap();
        // Identical rows give the kernel variance; distance 2 gives 2 e^-2.
        assert_relative_eq!(km[(0, 0)], 2.0);
        assert_relative_eq!(km[(0, 1)], 2.0 * (-2.0f64).exp(), max_relative = 1e-15);

        let far = DMatrix::from_column_slice(2, 1, &[0.0, 100.0]);
        let kf = kernel_matrix(&k, &far, &far).unwrap();
        assert!(kf[(0, 1)] < 1e-100);
        assert!(kf[(0, 1)].is_finite());
    }

    #[test]
    fn g_clamp_accepts_tiny_negative_eigenvalues() {
        let data = design_2x2();
        // Eigenvalues 1 and -5e-11: inside the clamp band.
        let g = DMatrix::from_row_slice(2, 2, &[0.5 - 2.5e-11, 0.5 + 2.5e-11, 0.5 + 2.5e-11, 0.5 - 2.5e-11]);
        let spec = CovarianceSpec::Lmm { g, sigma2: 1.0 };
        let b = realize(&spec, &data, ResidualMode::Residual).unwrap();
        // Clamped G must still yield a PSD cross term (no negative variance).
        assert!(b.v[(0, 0)] >= 1.0 - 1e-12);
    }

    #[test]
    fn g_with_large_negative_eigenvalue_is_rejected() {
        let data = design_2x2();
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]); // eigenvalues 1, -1
        let spec = CovarianceSpec::Lmm { g, sigma2: 1.0 };
        let err = realize(&spec, &data, ResidualMode::Residual).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn asymmetric_g_is_rejected() {
        let data = design_2x2();
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let err = realize(&CovarianceSpec::Lmm { g, sigma2: 1.0 }, &data, ResidualMode::Residual)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn residual_mode_satisfies_c_equals_v_minus_r() {
        // Prediction set = training set: the shared-random-effects reading
        // forces Cov(y_new, y) = V - R.
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, 1.5, 0.0, 1.0]);
        let data = DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0, 3.0]),
            DMatrix::from_element(3, 1, 1.0),
            z.clone(),
            DMatrix::from_element(3, 1, 1.0),
            z,
            None,
        )
        .unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = realize(&CovarianceSpec::Lmm { g, sigma2: 0.7 }, &data, ResidualMode::Residual)
            .unwrap();
        let diff = linalg::max_abs(&(&b.c - (&b.v - &b.r)));
        assert!(diff <= 1e-12, "C deviates from V - R by {diff:e}");
    }

    #[test]
    fn gaussian_conditional_mode_matches_hand_formula() {
        let z = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let data = DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0, 3.0]),
            DMatrix::from_element(3, 1, 1.0),
            z,
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(2, 1, 1.0),
            None,
        )
        .unwrap();
        let spec = CovarianceSpec::Lmm { g: DMatrix::from_element(1, 1, 2.0), sigma2: 1.0 };
        let b = realize(&spec, &data, ResidualMode::GaussianConditional).unwrap();
        // Hand computation: V = 2 J3 + I3, C = 2 J(2x3), V* = 2 J2 + I2.
        let v = &b.v;
        let vinv_ct = v.clone().cholesky().unwrap().solve(&b.c.transpose());
        let expected = &b.v_star - &b.c * vinv_ct;
        assert_relative_eq!(b.r_star[(0, 0)], expected[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(b.r_star[(0, 1)], expected[(0, 1)], max_relative = 1e-12);
        // R in this mode is V - B V^-1 B with B = 2 J3.
        let bmat = v - DMatrix::<f64>::identity(3, 3);
        let vinv_bt = v.clone().cholesky().unwrap().solve(&bmat.transpose());
        let r_expected = v - &bmat * vinv_bt;
        assert_relative_eq!(b.r[(0, 0)], r_expected[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(b.r[(1, 0)], r_expected[(1, 0)], max_relative = 1e-12);
    }

    #[test]
    fn gls_bundle_uses_v_as_residual() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v_star = DMatrix::from_element(1, 1, 3.0);
        let c = DMatrix::zeros(1, 2);
        let data = DesignData::without_random_effects(
            DVector::from_column_slice(&[1.0, -1.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let b = realize(&CovarianceSpec::Gls { v: v.clone(), v_star, c }, &data, ResidualMode::Residual)
            .unwrap();
        assert_eq!(b.r, v);
        assert_eq!(b.r_star, b.v_star);
    }

    #[test]
    fn gls_joint_psd_is_enforced() {
        // C too large for the marginals: not a valid joint covariance.
        let v = DMatrix::identity(1, 1);
        let v_star = DMatrix::identity(1, 1);
        let c = DMatrix::from_element(1, 1, 2.0);
        let data = DesignData::without_random_effects(
            DVector::from_column_slice(&[1.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let err = realize(&CovarianceSpec::Gls { v, v_star, c }, &data, ResidualMode::Residual)
            .unwrap_err();
        assert!(matches!(err, Error::JointCovarianceNotPsd { .. }));
    }

    #[test]
    fn design_validation_catches_mismatches() {
        let err = DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::<f64>::zeros(3, 1),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));

        let err = DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::zeros(2, 0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(1, 0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn column_subsets_share_rows() {
        let data = DesignData::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 3, &[7.0, 8.0, 9.0]),
            DMatrix::zeros(1, 0),
            None,
        )
        .unwrap();
        let sub = data.with_fixed_columns(&[0, 2]).unwrap();
        assert_eq!(sub.p(), 2);
        assert_eq!(sub.x()[(0, 1)], 3.0);
        assert_eq!(sub.x_star()[(0, 1)], 9.0);
        assert!(data.with_fixed_columns(&[5]).is_err());
    }
}
