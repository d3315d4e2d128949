//! Prediction-error criteria for transductive model selection.
//!
//! The central quantity is the transductive penalty `c_tai`: the expected gap
//! between the average training log-likelihood and the conditional expected
//! log-likelihood on the prediction set, for a fixed design pair. Adding it to
//! the observed average negative log-likelihood gives the estimator `tai`;
//! `cai` (trace of the training hat matrix) and `mai` (parameter count) are
//! the classical in-sample baselines, computed from the same likelihood so
//! the three are directly comparable.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor};
use crate::model::{realize, CovarianceBundle, CovarianceSpec, DesignData, ResidualMode};
use crate::predict::{hat_matrices, plain_factor, weighted_cross_product, GlsEstimate, HatPair};
use crate::scalar::Scalar;

/// Hat matrices whose worst reproduction error `|HX - X|`, `|H*X - X*|`
/// exceeds this are rejected by the unbiased-mean formulas.
pub const BIAS_DEFECT_TOL: f64 = 1e-6;

/// Criterion names in report order.
pub const CRITERION_NAMES: [&str; 4] = ["tAIC", "cAIC", "mAIC", "OptT"];

/// Average Gaussian negative log-likelihood of a residual vector:
/// `(log|R| + m log 2pi + r' R^-1 r) / (2m)`.
pub fn gaussian_neg_loglik<T: Scalar>(resid: &DVector<T>, factor: &CholeskyFactor<T>) -> T {
    let m = resid.len();
    assert_eq!(factor.dim(), m, "residual vector and covariance factor disagree");
    let m_t = T::from_count(m);
    let two = T::from_f64_c(2.0);
    let ln_two_pi = T::two_pi().ln();
    (factor.log_det() + m_t * ln_two_pi + factor.quad_form(resid)) / (two * m_t)
}

/// The seven design-only ingredients of the transductive penalty.
struct PenaltyTerms<T> {
    /// `tr(R^-1 H V) / n`
    a1: T,
    /// `tr(R*^-1 H* Cov(y, y*)) / n*`
    a2: T,
    /// `log |R*|^{1/n*} - log |R|^{1/n}`
    log_ratio: T,
    /// `tr(R*^-1 V*) / n*`
    b1: T,
    /// `tr(R^-1 V) / n`
    b2: T,
    /// `tr(R*^-1 H* V H*') / n*`
    c1: T,
    /// `tr(R^-1 H V H') / n`
    c2: T,
}

fn penalty_terms<T: Scalar>(bundle: &CovarianceBundle<T>, hats: &HatPair<T>) -> PenaltyTerms<T> {
    let n = T::from_count(bundle.n());
    let n_star = T::from_count(bundle.n_star());
    let rinv_h = bundle.chol_r.solve_matrix(&hats.h);
    let rsinv_hs = bundle.chol_r_star.solve_matrix(&hats.h_star);
    // Cov(y, y*) = C', so tr(R*^-1 H* C') contracts (R*^-1 H*) with C
    // entry by entry.
    let a1 = linalg::trace_prod(&rinv_h, &bundle.v) / n;
    let a2 = linalg::dot_elem(&rsinv_hs, &bundle.c) / n_star;
    let log_ratio = bundle.chol_r_star.log_det() / n_star - bundle.chol_r.log_det() / n;
    let b1 = linalg::trace(&bundle.chol_r_star.solve_matrix(&bundle.v_star)) / n_star;
    let b2 = linalg::trace(&bundle.chol_r.solve_matrix(&bundle.v)) / n;
    let hv = &hats.h * &bundle.v;
    let hsv = &hats.h_star * &bundle.v;
    let c1 = linalg::dot_elem(&rsinv_hs, &hsv) / n_star;
    let c2 = linalg::dot_elem(&rinv_h, &hv) / n;
    PenaltyTerms { a1, a2, log_ratio, b1, b2, c1, c2 }
}

fn require_unbiased<T: Scalar>(hats: &HatPair<T>) -> Result<()> {
    let defect = hats.bias_defect();
    if defect > T::from_f64_c(BIAS_DEFECT_TOL) {
        return Err(Error::BiasedPredictor {
            defect: defect.to_f64().unwrap_or(f64::NAN),
            tol: BIAS_DEFECT_TOL,
        });
    }
    Ok(())
}

fn check_means<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    mu: &DVector<T>,
    mu_star: &DVector<T>,
) -> Result<()> {
    if mu.len() != bundle.n() || mu_star.len() != bundle.n_star() {
        return Err(Error::DimensionMismatch(format!(
            "means have lengths {}/{} but the bundle is {}/{}",
            mu.len(),
            mu_star.len(),
            bundle.n(),
            bundle.n_star()
        )));
    }
    Ok(())
}

/// Transductive penalty for an unbiased linear predictor (`HX = X`,
/// `H*X = X*`):
///
/// `tr(R^-1 H V)/n - tr(R*^-1 H* Cov(y,y*))/n*`
/// `+ 1/2 [ log|R*|^{1/n*} - log|R|^{1/n} + tr(R*^-1 V*)/n* - tr(R^-1 V)/n ]`
/// `+ 1/2 [ tr(R*^-1 H* V H*')/n* - tr(R^-1 H V H')/n ]`.
pub fn c_tai<T: Scalar>(bundle: &CovarianceBundle<T>, hats: &HatPair<T>) -> Result<T> {
    require_unbiased(hats)?;
    let t = penalty_terms(bundle, hats);
    let half = T::from_f64_c(0.5);
    Ok(t.a1 - t.a2 + half * (t.log_ratio + t.b1 - t.b2) + half * (t.c1 - t.c2))
}

/// Transductive penalty with explicit mean corrections, valid for any linear
/// predictor. For an unbiased predictor the corrections vanish and this
/// agrees with [`c_tai`].
pub fn c_tai_biased<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
    mu: &DVector<T>,
    mu_star: &DVector<T>,
) -> Result<T> {
    check_means(bundle, mu, mu_star)?;
    let t = penalty_terms(bundle, hats);
    let half = T::from_f64_c(0.5);
    let two = T::from_f64_c(2.0);
    let n = T::from_count(bundle.n());
    let n_star = T::from_count(bundle.n_star());

    // tr(R^-1 (2 H mu mu' - mu mu' - H mu mu' H')) and its prediction-side
    // counterpart, contracted down to quadratic forms.
    let h_mu = &hats.h * mu;
    let rinv_mu = bundle.chol_r.solve_vector(mu);
    let rinv_h_mu = bundle.chol_r.solve_vector(&h_mu);
    let train = two * mu.dot(&rinv_h_mu) - mu.dot(&rinv_mu) - h_mu.dot(&rinv_h_mu);

    let hs_mu = &hats.h_star * mu;
    let rsinv_mu_star = bundle.chol_r_star.solve_vector(mu_star);
    let rsinv_hs_mu = bundle.chol_r_star.solve_vector(&hs_mu);
    let pred =
        two * mu_star.dot(&rsinv_hs_mu) - mu_star.dot(&rsinv_mu_star) - hs_mu.dot(&rsinv_hs_mu);

    Ok(t.a1 - t.a2
        + half * (t.log_ratio + t.b1 - t.b2)
        + half * (t.c1 - t.c2)
        + half * (train / n - pred / n_star))
}

/// Closed-form transductive penalty for the GLS regime (no cross-covariance):
///
/// `p/n + 1/2 log(|V*|^{1/n*} / |V|^{1/n})`
/// `+ 1/2 tr[ Var(beta_hat) ( X*'V*^-1 X*/n* - X'V^-1 X/n ) ]`.
pub fn c_tai_gls<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    est: &GlsEstimate<T>,
) -> Result<T> {
    let c_scale = linalg::max_abs(&bundle.c);
    if c_scale > T::from_f64_c(1e-12) {
        return Err(Error::CrossCovarianceNonzero {
            max_abs: c_scale.to_f64().unwrap_or(f64::NAN),
        });
    }
    if est.beta_hat.len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} coefficients but the design has {}",
            est.beta_hat.len(),
            data.p()
        )));
    }
    let n = T::from_count(data.n());
    let n_star = T::from_count(data.n_star());
    let p = T::from_count(data.p());
    let half = T::from_f64_c(0.5);

    let m = weighted_cross_product(data, bundle)?;
    let chol_v_star = plain_factor(bundle.v_star.clone(), "prediction covariance V*")?;
    let w_star = chol_v_star.solve_matrix(data.x_star());
    let mut m_star = data.x_star().tr_mul(&w_star);
    linalg::symmetrize(&mut m_star);

    let log_ratio = chol_v_star.log_det() / n_star - bundle.chol_v.log_det() / n;
    let diff = m_star / n_star - m / n;
    let trace_term = linalg::trace_prod(&est.var_beta_hat, &diff);
    Ok(p / n + half * log_ratio + half * trace_term)
}

/// Observed average training negative log-likelihood, `-l(y)/n`, under the
/// model's residual covariance.
pub fn training_neg_loglik<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> T {
    let resid = data.y() - &hats.f_hat;
    gaussian_neg_loglik(&resid, &bundle.chol_r)
}

/// Transductive information estimator: `-l(y)/n + c_tai`.
pub fn tai<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    Ok(training_neg_loglik(data, bundle, hats) + c_tai(bundle, hats)?)
}

/// Conditional in-sample estimator: `-l(y)/n + tr(H)/n`.
pub fn cai<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    let n = T::from_count(data.n());
    Ok(training_neg_loglik(data, bundle, hats) + linalg::trace(&hats.h) / n)
}

/// Marginal in-sample estimator: `-l(y)/n + p/n`.
pub fn mai<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    let n = T::from_count(data.n());
    Ok(training_neg_loglik(data, bundle, hats) + T::from_count(data.p()) / n)
}

/// Squared-error optimism of the predictor pair: the expected gap between
/// the average prediction loss `|y* - H*y|^2/n*` and the training loss
/// `|y - Hy|^2/n`. Means are required when the predictor is biased.
pub fn w_t<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
    means: Option<(&DVector<T>, &DVector<T>)>,
) -> Result<T> {
    let n = T::from_count(bundle.n());
    let n_star = T::from_count(bundle.n_star());
    let two = T::from_f64_c(2.0);
    let hv = &hats.h * &bundle.v;
    let hsv = &hats.h_star * &bundle.v;
    let unbiased = two * linalg::trace_prod(&hats.h, &bundle.v) / n
        - two * linalg::dot_elem(&hats.h_star, &bundle.c) / n_star
        + linalg::trace(&bundle.v_star) / n_star
        - linalg::trace(&bundle.v) / n
        + linalg::dot_elem(&hsv, &hats.h_star) / n_star
        - linalg::dot_elem(&hv, &hats.h) / n;
    match means {
        None => {
            require_unbiased(hats)?;
            Ok(unbiased)
        }
        Some((mu, mu_star)) => {
            check_means(bundle, mu, mu_star)?;
            // The mean terms contract to squared prediction biases.
            let train_bias = mu - &hats.h * mu;
            let pred_bias = mu_star - &hats.h_star * mu;
            Ok(unbiased - train_bias.norm_squared() / n + pred_bias.norm_squared() / n_star)
        }
    }
}

/// Optimism-corrected squared-error loss estimate:
/// `|y - Hy|^2 / n + w_t`.
pub fn loss_opt_t<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    let n = T::from_count(data.n());
    let resid = data.y() - &hats.f_hat;
    Ok(resid.norm_squared() / n + w_t(bundle, hats, None)?)
}

/// Mahalanobis-loss optimism: the analogue of `w_t` with squared errors
/// weighted by the residual precisions,
///
/// `2 tr(R^-1 H V)/n - 2 tr(R*^-1 H* Cov(y,y*))/n* + tr(R*^-1 V*)/n*`
/// `- tr(R^-1 V)/n + tr(R*^-1 H* V H*')/n* - tr(R^-1 H V H')/n`,
///
/// which equals `2 c_tai - log(|R*|^{1/n*} / |R|^{1/n})`.
pub fn mahalanobis_correction<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    require_unbiased(hats)?;
    let t = penalty_terms(bundle, hats);
    let two = T::from_f64_c(2.0);
    Ok(two * (t.a1 - t.a2) + t.b1 - t.b2 + t.c1 - t.c2)
}

/// Exact conditional risk of a predictor under a known generating model:
/// the expected average negative log-likelihood of fresh prediction
/// responses given the realized training response,
///
/// `[log|R*| + n* log 2pi + tr(R*^-1 Sigma_c) + d' R*^-1 d] / (2 n*)`,
///
/// with `Sigma_c = V* - C V^-1 C'` the true conditional variance and
/// `d = mu* + C V^-1 (y - mu) - H* y` the conditional-mean prediction error.
/// `true_data` is the generating design: its X/X* define the true means and
/// its y is the realized response the candidate predictor saw.
pub fn oracle_conditional_risk<T: Scalar>(
    true_bundle: &CovarianceBundle<T>,
    true_beta: &DVector<T>,
    true_data: &DesignData<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    if true_beta.len() != true_data.p() {
        return Err(Error::DimensionMismatch(format!(
            "true beta has length {} but the generating design has {} columns",
            true_beta.len(),
            true_data.p()
        )));
    }
    if hats.h_star.nrows() != true_data.n_star() || hats.h_star.ncols() != true_data.n() {
        return Err(Error::DimensionMismatch(format!(
            "H* is {}x{} but the generating design is {}/{}",
            hats.h_star.nrows(),
            hats.h_star.ncols(),
            true_data.n_star(),
            true_data.n()
        )));
    }
    let n_star = T::from_count(true_data.n_star());
    let two = T::from_f64_c(2.0);
    let mu = true_data.x() * true_beta;
    let mu_star = true_data.x_star() * true_beta;
    let cond_mean = &mu_star + &true_bundle.c * true_bundle.chol_v.solve_vector(&(true_data.y() - &mu));
    let vinv_ct = true_bundle.chol_v.solve_matrix(&true_bundle.c.transpose());
    let mut sigma_c = &true_bundle.v_star - &true_bundle.c * vinv_ct;
    linalg::symmetrize(&mut sigma_c);
    let delta = cond_mean - &hats.f_star_hat;
    let ln_two_pi = T::two_pi().ln();
    Ok((true_bundle.chol_r_star.log_det()
        + n_star * ln_two_pi
        + linalg::trace(&true_bundle.chol_r_star.solve_matrix(&sigma_c))
        + true_bundle.chol_r_star.quad_form(&delta))
        / (two * n_star))
}

/// Exact transductive risk of a predictor under a known generating model:
/// the expectation of the conditional risk over the training response,
///
/// `[log|R*| + n* log 2pi + tr(R*^-1 S) + e' R*^-1 e] / (2 n*)`,
///
/// with `S = V* - C H*' - H* C' + H* V H*'` (the covariance of
/// `y* - H* y`) and `e = mu* - H* mu` the mean prediction bias.
pub fn oracle_expected_risk<T: Scalar>(
    true_bundle: &CovarianceBundle<T>,
    true_beta: &DVector<T>,
    true_data: &DesignData<T>,
    hats: &HatPair<T>,
) -> Result<T> {
    if true_beta.len() != true_data.p() {
        return Err(Error::DimensionMismatch(format!(
            "true beta has length {} but the generating design has {} columns",
            true_beta.len(),
            true_data.p()
        )));
    }
    if hats.h_star.nrows() != true_data.n_star() || hats.h_star.ncols() != true_data.n() {
        return Err(Error::DimensionMismatch(format!(
            "H* is {}x{} but the generating design is {}/{}",
            hats.h_star.nrows(),
            hats.h_star.ncols(),
            true_data.n_star(),
            true_data.n()
        )));
    }
    let n_star = T::from_count(true_data.n_star());
    let two = T::from_f64_c(2.0);
    let mu = true_data.x() * true_beta;
    let mu_star = true_data.x_star() * true_beta;
    let bias = mu_star - &hats.h_star * mu;
    let rsinv_hs = true_bundle.chol_r_star.solve_matrix(&hats.h_star);
    let hsv = &hats.h_star * &true_bundle.v;
    let trace_term = linalg::trace(&true_bundle.chol_r_star.solve_matrix(&true_bundle.v_star))
        - two * linalg::dot_elem(&rsinv_hs, &true_bundle.c)
        + linalg::dot_elem(&rsinv_hs, &hsv);
    let ln_two_pi = T::two_pi().ln();
    Ok((true_bundle.chol_r_star.log_det()
        + n_star * ln_two_pi
        + trace_term
        + true_bundle.chol_r_star.quad_form(&bias))
        / (two * n_star))
}

/// Realized holdout value `-l(y*)/n*` when the prediction responses are
/// known.
pub fn holdout_neg_loglik<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
) -> Option<T> {
    data.y_star()
        .map(|y_star| gaussian_neg_loglik(&(y_star - &hats.f_star_hat), &bundle.chol_r_star))
}

/// All criterion values for one fitted model.
#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport<T: Scalar> {
    pub neg_loglik_train: T,
    pub c_tai: T,
    pub tai: T,
    pub cai: T,
    pub mai: T,
    pub w_t: T,
    pub loss_opt_t: T,
    pub mahalanobis_correction: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_conditional_risk: Option<T>,
    pub jitter_applied: T,
}

/// Known generating model, available in simulations.
#[derive(Clone, Debug)]
pub struct OracleModel<T: Scalar> {
    pub bundle: CovarianceBundle<T>,
    pub beta: DVector<T>,
    pub data: DesignData<T>,
}

/// Computes the full report for one realized model.
pub fn criterion_report<T: Scalar>(
    data: &DesignData<T>,
    bundle: &CovarianceBundle<T>,
    hats: &HatPair<T>,
    oracle: Option<&OracleModel<T>>,
) -> Result<CriterionReport<T>> {
    let neg_loglik_train = training_neg_loglik(data, bundle, hats);
    let c_tai_value = c_tai(bundle, hats)?;
    let n = T::from_count(data.n());
    let oracle_value = oracle
        .map(|o| oracle_conditional_risk(&o.bundle, &o.beta, &o.data, hats))
        .transpose()?;
    Ok(CriterionReport {
        neg_loglik_train,
        c_tai: c_tai_value,
        tai: neg_loglik_train + c_tai_value,
        cai: neg_loglik_train + linalg::trace(&hats.h) / n,
        mai: neg_loglik_train + T::from_count(data.p()) / n,
        w_t: w_t(bundle, hats, None)?,
        loss_opt_t: loss_opt_t(data, bundle, hats)?,
        mahalanobis_correction: mahalanobis_correction(bundle, hats)?,
        oracle_conditional_risk: oracle_value,
        jitter_applied: bundle.jitter_applied,
    })
}

/// One candidate in a model-selection run.
#[derive(Clone, Debug)]
pub struct CandidateModel<T: Scalar> {
    pub id: String,
    pub data: DesignData<T>,
    pub spec: CovarianceSpec<T>,
}

/// Options for [`evaluate_model_set`].
#[derive(Clone, Debug, Default)]
pub struct EvalOptions<T: Scalar> {
    pub r_mode: ResidualMode,
    pub oracle: Option<OracleModel<T>>,
}

/// Report for one candidate, including the realized holdout likelihood when
/// the prediction responses are known.
#[derive(Clone, Debug, Serialize)]
pub struct ModelReport<T: Scalar> {
    pub id: String,
    #[serde(flatten)]
    pub report: CriterionReport<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_neg_loglik: Option<T>,
}

/// Outcome of evaluating a candidate set: per-model reports plus the argmin
/// model per criterion. Exact ties go to the lowest index and are listed in
/// `ties`.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionResult<T: Scalar> {
    pub reports: Vec<ModelReport<T>>,
    pub chosen: BTreeMap<String, String>,
    pub ties: BTreeMap<String, Vec<String>>,
}

/// Realizes, fits, and scores every candidate, then selects per criterion.
/// All candidates must share the training response and prediction rows.
pub fn evaluate_model_set<T: Scalar>(
    models: &[CandidateModel<T>],
    options: &EvalOptions<T>,
) -> Result<SelectionResult<T>> {
    if models.is_empty() {
        return Err(Error::EmptyModelSet);
    }
    let first = &models[0].data;
    for m in &models[1..] {
        if m.data.y() != first.y() {
            return Err(Error::InconsistentModelSet(format!(
                "model '{}' has a different training response",
                m.id
            )));
        }
        if m.data.n_star() != first.n_star() || m.data.y_star() != first.y_star() {
            return Err(Error::InconsistentModelSet(format!(
                "model '{}' has different prediction rows",
                m.id
            )));
        }
    }
    let mut reports = Vec::with_capacity(models.len());
    for m in models {
        let bundle = realize(&m.spec, &m.data, options.r_mode)?;
        let hats = hat_matrices(&m.data, &bundle)?;
        let report = criterion_report(&m.data, &bundle, &hats, options.oracle.as_ref())?;
        let holdout = holdout_neg_loglik(&m.data, &bundle, &hats);
        reports.push(ModelReport { id: m.id.clone(), report, holdout_neg_loglik: holdout });
    }
    let mut chosen = BTreeMap::new();
    let mut ties = BTreeMap::new();
    for name in CRITERION_NAMES {
        let value = |r: &ModelReport<T>| match name {
            "tAIC" => r.report.tai,
            "cAIC" => r.report.cai,
            "mAIC" => r.report.mai,
            _ => r.report.loss_opt_t,
        };
        let mut best = 0usize;
        for (i, r) in reports.iter().enumerate().skip(1) {
            if value(r) < value(&reports[best]) {
                best = i;
            }
        }
        let tied: Vec<String> = reports
            .iter()
            .filter(|r| value(r) == value(&reports[best]))
            .map(|r| r.id.clone())
            .collect();
        if tied.len() > 1 {
            ties.insert(name.to_string(), tied);
        }
        chosen.insert(name.to_string(), reports[best].id.clone());
    }
    Ok(SelectionResult { reports, chosen, ties })
}
