//! Longitudinal simulation study: data generation, candidate models, the
//! replication harness, and Monte Carlo oracles for the penalty formulas.
//!
//! The generating process is a random intercept + random slope growth model.
//! Subject `s` observed at time `t` has
//!
//! `y = x' beta + b1_s + t b2_s + eps`,
//!
//! with `b1 ~ N(0, var_b1)`, `b2 ~ N(0, var_b2)`, `eps ~ N(0, sigma2)`, all
//! independent. Fixed covariates are an intercept, a Bernoulli(1/2) flag,
//! five standard normal columns, and the time itself. Training rows use one
//! grid of times per subject; prediction rows extrapolate to later times for
//! the same subjects, so training and prediction responses share the random
//! effects and are genuinely dependent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::criteria::{
    cai, gaussian_neg_loglik, mai, oracle_conditional_risk, oracle_expected_risk, tai,
    CandidateModel,
};
use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;
use crate::model::{realize, CovarianceBundle, CovarianceSpec, DesignData, ResidualMode};
use crate::predict::{hat_matrices, HatPair};
use crate::scalar::Scalar;

/// Configuration of one simulation experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Number of subjects.
    pub subjects: usize,
    /// Residual noise variance.
    pub sigma2: f64,
    /// Number of replications.
    pub replications: usize,
    /// Master seed; every replication derives its own streams from it.
    pub seed: u64,
    /// Random intercept variance.
    pub var_b1: f64,
    /// Random slope variance.
    pub var_b2: f64,
    /// Observation times per subject in the training set.
    pub train_times: Vec<f64>,
    /// Extrapolation times per subject in the prediction set.
    pub pred_times: Vec<f64>,
    /// True fixed-effect coefficients, ordered
    /// `[intercept, flag, z1..z5, time]`.
    pub beta: Vec<f64>,
    /// Redraw the covariates every replication (`true`) or hold the design
    /// fixed across replications (`false`).
    pub redraw_covariates: bool,
    /// Draw the Bernoulli flag once per subject instead of once per row.
    pub bernoulli_per_subject: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            subjects: 10,
            sigma2: 15.0,
            replications: 200,
            seed: 1729,
            var_b1: 15.0,
            var_b2: 1.0,
            train_times: (1..=10).map(|t| t as f64).collect(),
            pred_times: vec![15.0, 20.0],
            beta: vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 0.5],
            redraw_covariates: true,
            bernoulli_per_subject: false,
        }
    }
}

/// Number of fixed-effect columns in the generating design.
pub const GENERATING_COLUMNS: usize = 8;
/// Index of the time column in the generating design.
pub const TIME_COLUMN: usize = 7;

/// Fixed-effect column subsets of the three candidate mean structures.
pub const CANDIDATE_COLUMNS: [&[usize]; 3] =
    [&[0, 1, 2, TIME_COLUMN], &[0, 1, 2, 3, 4, TIME_COLUMN], &[0, 1, 2, 3, 4, 5, 6, TIME_COLUMN]];
/// Candidate identifiers, smallest mean structure first; the last one is the
/// generating structure.
pub const CANDIDATE_IDS: [&str; 3] = ["m1", "m2", "m3"];

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::InvalidParameter("subjects must be at least 1".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if self.var_b1 < 0.0 || self.var_b2 < 0.0 {
            return Err(Error::InvalidParameter(
                "random-effect variances must be nonnegative".into(),
            ));
        }
        if self.train_times.is_empty() || self.pred_times.is_empty() {
            return Err(Error::InvalidParameter(
                "train_times and pred_times must be nonempty".into(),
            ));
        }
        if self.beta.len() != GENERATING_COLUMNS {
            return Err(Error::InvalidParameter(format!(
                "beta must have {} entries, got {}",
                GENERATING_COLUMNS,
                self.beta.len()
            )));
        }
        if self.subjects * self.train_times.len() <= GENERATING_COLUMNS {
            return Err(Error::InvalidParameter(format!(
                "{} subjects x {} times cannot identify {} fixed effects",
                self.subjects,
                self.train_times.len(),
                GENERATING_COLUMNS
            )));
        }
        Ok(())
    }

    /// Training rows per replication.
    pub fn n(&self) -> usize {
        self.subjects * self.train_times.len()
    }

    /// Prediction rows per replication.
    pub fn n_star(&self) -> usize {
        self.subjects * self.pred_times.len()
    }
}

/// SplitMix64 finalizer over the (seed, replication, stream) triple so that
/// every stream of every replication gets an independent, reproducible RNG
/// regardless of evaluation order.
fn mix_key(seed: u64, replication: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ replication.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for byte in name.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// A named, replication-keyed ChaCha stream.
pub fn stream_rng(seed: u64, replication: u64, stream: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix_key(seed, replication, fnv1a(stream)))
}

fn standard_normal<T: Scalar>(rng: &mut ChaCha12Rng) -> T
where
    StandardNormal: Distribution<T>,
{
    StandardNormal.sample(rng)
}

/// One generated dataset together with its generating model.
#[derive(Clone, Debug)]
pub struct Replication<T: Scalar> {
    pub data: DesignData<T>,
    pub spec: CovarianceSpec<T>,
    pub beta: DVector<T>,
}

/// Generates the data for one replication. The draw order is fixed
/// (covariates, then random effects, then noise, each from its own stream),
/// so results are bit-identical however replications are scheduled.
pub fn generate_replication<T: Scalar>(
    config: &SimulationConfig,
    replication: usize,
) -> Result<Replication<T>>
where
    StandardNormal: Distribution<T>,
{
    config.validate()?;
    let s = config.subjects;
    let n = config.n();
    let n_star = config.n_star();
    let rep = replication as u64;

    let cov_rep = if config.redraw_covariates { rep } else { 0 };
    let mut rng_cov = stream_rng(config.seed, cov_rep, "covariates");
    let subject_flags: Vec<bool> = if config.bernoulli_per_subject {
        (0..s).map(|_| rng_cov.random_bool(0.5)).collect()
    } else {
        Vec::new()
    };
    let fill_design = |times: &[f64], rng: &mut ChaCha12Rng, flags: &[bool]| {
        let rows = s * times.len();
        let mut x = DMatrix::<T>::zeros(rows, GENERATING_COLUMNS);
        let mut z = DMatrix::<T>::zeros(rows, 2 * s);
        let mut row = 0;
        for subject in 0..s {
            for &t in times {
                x[(row, 0)] = T::one();
                x[(row, 1)] = if config.bernoulli_per_subject {
                    if flags[subject] {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else if rng.random_bool(0.5) {
                    T::one()
                } else {
                    T::zero()
                };
                for col in 2..TIME_COLUMN {
                    x[(row, col)] = standard_normal(rng);
                }
                x[(row, TIME_COLUMN)] = T::from_f64_c(t);
                z[(row, 2 * subject)] = T::one();
                z[(row, 2 * subject + 1)] = T::from_f64_c(t);
                row += 1;
            }
        }
        (x, z)
    };
    let (x, z) = fill_design(&config.train_times, &mut rng_cov, &subject_flags);
    let (x_star, z_star) = fill_design(&config.pred_times, &mut rng_cov, &subject_flags);

    let mut rng_b = stream_rng(config.seed, rep, "random_effects");
    let sd_b1 = T::from_f64_c(config.var_b1.sqrt());
    let sd_b2 = T::from_f64_c(config.var_b2.sqrt());
    let mut b = DVector::<T>::zeros(2 * s);
    for subject in 0..s {
        b[2 * subject] = standard_normal::<T>(&mut rng_b) * sd_b1;
        b[2 * subject + 1] = standard_normal::<T>(&mut rng_b) * sd_b2;
    }

    let mut rng_eps = stream_rng(config.seed, rep, "noise");
    let sd_eps = T::from_f64_c(config.sigma2.sqrt());
    let beta = DVector::from_iterator(
        GENERATING_COLUMNS,
        config.beta.iter().map(|&v| T::from_f64_c(v)),
    );
    let mut y = &x * &beta + &z * &b;
    for i in 0..n {
        y[i] += standard_normal::<T>(&mut rng_eps) * sd_eps;
    }
    let mut y_star = &x_star * &beta + &z_star * &b;
    for i in 0..n_star {
        y_star[i] += standard_normal::<T>(&mut rng_eps) * sd_eps;
    }

    let mut g = DMatrix::<T>::zeros(2 * s, 2 * s);
    for subject in 0..s {
        g[(2 * subject, 2 * subject)] = T::from_f64_c(config.var_b1);
        g[(2 * subject + 1, 2 * subject + 1)] = T::from_f64_c(config.var_b2);
    }
    let data = DesignData::new(y, x, z, x_star, z_star, Some(y_star))?;
    Ok(Replication { data, spec: CovarianceSpec::Lmm { g, sigma2: T::from_f64_c(config.sigma2) }, beta })
}

/// The three nested candidate mean structures over a generated replication.
/// All candidates share the response, the random-effect design, and the
/// covariance specification; only the fixed-effect columns differ.
pub fn candidate_models<T: Scalar>(replication: &Replication<T>) -> Result<Vec<CandidateModel<T>>> {
    CANDIDATE_COLUMNS
        .iter()
        .zip(CANDIDATE_IDS)
        .map(|(cols, id)| {
            Ok(CandidateModel {
                id: id.to_string(),
                data: replication.data.with_fixed_columns(cols)?,
                spec: replication.spec.clone(),
            })
        })
        .collect()
}

/// Criterion and oracle values of one candidate in one replication.
#[derive(Clone, Debug, Serialize)]
pub struct ModelCriteria<T: Scalar> {
    pub model: String,
    pub tai: T,
    pub cai: T,
    pub mai: T,
    pub oracle_conditional: T,
    pub oracle_expected: T,
}

/// Everything recorded about one replication.
#[derive(Clone, Debug, Serialize)]
pub struct ReplicationRecord<T: Scalar> {
    pub replication: usize,
    pub models: Vec<ModelCriteria<T>>,
    /// Criterion name -> id of the model it selects.
    pub chosen: BTreeMap<String, String>,
    pub oracle_conditional_best: String,
    pub oracle_expected_best: String,
    pub jitter_applied: T,
}

/// Aggregated outcome of a simulation experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary<T: Scalar> {
    pub config: SimulationConfig,
    pub records: Vec<ReplicationRecord<T>>,
    /// Mean criterion values per model across successful replications.
    pub mean_by_model: BTreeMap<String, ModelCriteria<T>>,
    /// Mean conditional true risk of the model each selector picks; the two
    /// oracle selectors provide the attainable floor.
    pub risk_of_selected: BTreeMap<String, T>,
    /// Fraction of replications in which each criterion picks the model the
    /// conditional oracle picks.
    pub agreement_rate_conditional: BTreeMap<String, f64>,
    /// Same against the expected-risk oracle.
    pub agreement_rate_expected: BTreeMap<String, f64>,
    /// Replications that failed, with reasons; excluded from all averages.
    pub failed_replications: Vec<(usize, String)>,
    /// Largest diagonal jitter any replication needed (0 when none did).
    pub max_jitter: T,
    pub jittered_replications: usize,
}

const SELECTING_CRITERIA: [&str; 3] = ["tAIC", "cAIC", "mAIC"];

fn argmin_by<T: Scalar, F: Fn(&ModelCriteria<T>) -> T>(models: &[ModelCriteria<T>], f: F) -> usize {
    let mut best = 0;
    for (i, m) in models.iter().enumerate().skip(1) {
        if f(m) < f(&models[best]) {
            best = i;
        }
    }
    best
}

fn run_one_replication<T: Scalar>(
    config: &SimulationConfig,
    replication: usize,
) -> Result<ReplicationRecord<T>>
where
    StandardNormal: Distribution<T>,
{
    let generated = generate_replication::<T>(config, replication)?;
    // The covariance structure is shared by all candidates, so realize the
    // bundle once against the full design.
    let bundle = realize(&generated.spec, &generated.data, ResidualMode::Residual)?;
    let mut models = Vec::with_capacity(CANDIDATE_COLUMNS.len());
    for (cols, id) in CANDIDATE_COLUMNS.iter().zip(CANDIDATE_IDS) {
        let data = generated.data.with_fixed_columns(cols)?;
        let hats = hat_matrices(&data, &bundle)?;
        models.push(ModelCriteria {
            model: id.to_string(),
            tai: tai(&data, &bundle, &hats)?,
            cai: cai(&data, &bundle, &hats)?,
            mai: mai(&data, &bundle, &hats)?,
            oracle_conditional: oracle_conditional_risk(
                &bundle,
                &generated.beta,
                &generated.data,
                &hats,
            )?,
            oracle_expected: oracle_expected_risk(
                &bundle,
                &generated.beta,
                &generated.data,
                &hats,
            )?,
        });
    }
    let mut chosen = BTreeMap::new();
    for name in SELECTING_CRITERIA {
        let idx = match name {
            "tAIC" => argmin_by(&models, |m| m.tai),
            "cAIC" => argmin_by(&models, |m| m.cai),
            _ => argmin_by(&models, |m| m.mai),
        };
        chosen.insert(name.to_string(), models[idx].model.clone());
    }
    let cond_best = argmin_by(&models, |m| m.oracle_conditional);
    let exp_best = argmin_by(&models, |m| m.oracle_expected);
    Ok(ReplicationRecord {
        replication,
        oracle_conditional_best: models[cond_best].model.clone(),
        oracle_expected_best: models[exp_best].model.clone(),
        models,
        chosen,
        jitter_applied: bundle.jitter_applied,
    })
}

/// Runs the full experiment: generates, fits, and scores every replication
/// in parallel (deterministically), then aggregates selection performance.
pub fn run_experiment<T: Scalar>(config: &SimulationConfig) -> Result<ExperimentSummary<T>>
where
    StandardNormal: Distribution<T>,
{
    config.validate()?;
    let outcomes: Vec<(usize, Result<ReplicationRecord<T>>)> = (0..config.replications)
        .into_par_iter()
        .map(|rep| (rep, run_one_replication::<T>(config, rep)))
        .collect();

    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(err) => failed.push((rep, err.to_string())),
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "all {} replications failed; first failure: {}",
            config.replications,
            failed.first().map(|(_, e)| e.as_str()).unwrap_or("unknown")
        )));
    }

    let count = T::from_count(records.len());
    let mut mean_by_model: BTreeMap<String, ModelCriteria<T>> = BTreeMap::new();
    for id in CANDIDATE_IDS {
        let mut acc = ModelCriteria {
            model: id.to_string(),
            tai: T::zero(),
            cai: T::zero(),
            mai: T::zero(),
            oracle_conditional: T::zero(),
            oracle_expected: T::zero(),
        };
        for record in &records {
            let m = record
                .models
                .iter()
                .find(|m| m.model == id)
                .expect("every record scores every candidate");
            acc.tai += m.tai;
            acc.cai += m.cai;
            acc.mai += m.mai;
            acc.oracle_conditional += m.oracle_conditional;
            acc.oracle_expected += m.oracle_expected;
        }
        acc.tai /= count;
        acc.cai /= count;
        acc.mai /= count;
        acc.oracle_conditional /= count;
        acc.oracle_expected /= count;
        mean_by_model.insert(id.to_string(), acc);
    }

    let conditional_of = |record: &ReplicationRecord<T>, id: &str| {
        record
            .models
            .iter()
            .find(|m| m.model == id)
            .map(|m| m.oracle_conditional)
            .expect("selected model is scored")
    };
    let mut risk_of_selected = BTreeMap::new();
    let mut agreement_conditional = BTreeMap::new();
    let mut agreement_expected = BTreeMap::new();
    for name in SELECTING_CRITERIA {
        let mut risk = T::zero();
        let mut agree_cond = 0usize;
        let mut agree_exp = 0usize;
        for record in &records {
            let picked = record.chosen[name].as_str();
            risk += conditional_of(record, picked);
            if picked == record.oracle_conditional_best {
                agree_cond += 1;
            }
            if picked == record.oracle_expected_best {
                agree_exp += 1;
            }
        }
        risk_of_selected.insert(name.to_string(), risk / count);
        agreement_conditional.insert(name.to_string(), agree_cond as f64 / records.len() as f64);
        agreement_expected.insert(name.to_string(), agree_exp as f64 / records.len() as f64);
    }
    let mut floor_cond = T::zero();
    let mut floor_exp = T::zero();
    for record in &records {
        floor_cond += conditional_of(record, &record.oracle_conditional_best);
        floor_exp += conditional_of(record, &record.oracle_expected_best);
    }
    risk_of_selected.insert("oracle_conditional".to_string(), floor_cond / count);
    risk_of_selected.insert("oracle_expected".to_string(), floor_exp / count);

    let mut max_jitter = T::zero();
    let mut jittered = 0usize;
    for record in &records {
        if record.jitter_applied > T::zero() {
            jittered += 1;
        }
        max_jitter = max_jitter.max(record.jitter_applied);
    }

    Ok(ExperimentSummary {
        config: config.clone(),
        records,
        mean_by_model,
        risk_of_selected,
        agreement_rate_conditional: agreement_conditional,
        agreement_rate_expected: agreement_expected,
        failed_replications: failed,
        max_jitter,
        jittered_replications: jittered,
    })
}

/// Monte Carlo estimates of the penalty quantities from joint draws of
/// `(y, y*)` under a known model, with standard errors.
#[derive(Clone, Debug)]
pub struct OracleDraws<T: Scalar> {
    pub draws: usize,
    /// Mean and SE of the per-draw likelihood gap, estimating the
    /// transductive penalty.
    pub c_tai_mean: T,
    pub c_tai_se: T,
    /// Mean and SE of the per-draw squared-error gap, estimating `w_t`.
    pub w_t_mean: T,
    pub w_t_se: T,
    /// Mean prediction-side negative log-likelihood (the transductive risk).
    pub transductive_nll_mean: T,
    pub transductive_nll_se: T,
    pub training_nll_mean: T,
    pub training_nll_se: T,
}

fn mean_and_se<T: Scalar>(values: &[T]) -> (T, T) {
    let count = T::from_count(values.len());
    let mean = values.iter().copied().sum::<T>() / count;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / (count - T::one());
    (mean, (var / count).sqrt())
}

/// Estimates the penalty quantities by simulation: draws `(y, y*)` jointly
/// from the model `(bundle, beta)` over the given designs and evaluates the
/// fixed predictor pair on every draw. Works for biased predictors too — the
/// estimates then target the mean-corrected penalties.
pub fn sampling_oracle<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    beta: &DVector<T>,
    data: &DesignData<T>,
    hats: &HatPair<T>,
    draws: usize,
    seed: u64,
) -> Result<OracleDraws<T>>
where
    StandardNormal: Distribution<T>,
{
    if draws < 2 {
        return Err(Error::InvalidParameter("at least 2 draws required".into()));
    }
    if beta.len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {} but the design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    let n = data.n();
    let n_star = data.n_star();
    let total = n + n_star;
    let mut joint = DMatrix::<T>::zeros(total, total);
    joint.view_mut((0, 0), (n, n)).copy_from(&bundle.v);
    joint.view_mut((n, n), (n_star, n_star)).copy_from(&bundle.v_star);
    joint.view_mut((n, 0), (n_star, n)).copy_from(&bundle.c);
    joint.view_mut((0, n), (n, n_star)).copy_from(&bundle.c.transpose());
    let (_, joint_factor) = CholeskyFactor::decompose(joint, "joint covariance of (y, y*)")?;
    let lower = joint_factor.lower();

    let mu = data.x() * beta;
    let mu_star = data.x_star() * beta;
    let n_t = T::from_count(n);
    let n_star_t = T::from_count(n_star);

    let mut rng = stream_rng(seed, 0, "oracle_joint");
    let mut gaps = Vec::with_capacity(draws);
    let mut sq_gaps = Vec::with_capacity(draws);
    let mut pred_nlls = Vec::with_capacity(draws);
    let mut train_nlls = Vec::with_capacity(draws);
    let mut u = DVector::<T>::zeros(total);
    for _ in 0..draws {
        for i in 0..total {
            u[i] = standard_normal(&mut rng);
        }
        let w = &lower * &u;
        let y = DVector::from_fn(n, |i, _| mu[i] + w[i]);
        let y_star = DVector::from_fn(n_star, |i, _| mu_star[i] + w[n + i]);
        let fit = &hats.h * &y;
        let fit_star = &hats.h_star * &y;
        let resid = &y - &fit;
        let resid_star = &y_star - &fit_star;
        let train_nll = gaussian_neg_loglik(&resid, &bundle.chol_r);
        let pred_nll = gaussian_neg_loglik(&resid_star, &bundle.chol_r_star);
        gaps.push(pred_nll - train_nll);
        sq_gaps.push(resid_star.norm_squared() / n_star_t - resid.norm_squared() / n_t);
        pred_nlls.push(pred_nll);
        train_nlls.push(train_nll);
    }
    let (c_tai_mean, c_tai_se) = mean_and_se(&gaps);
    let (w_t_mean, w_t_se) = mean_and_se(&sq_gaps);
    let (transductive_nll_mean, transductive_nll_se) = mean_and_se(&pred_nlls);
    let (training_nll_mean, training_nll_se) = mean_and_se(&train_nlls);
    Ok(OracleDraws {
        draws,
        c_tai_mean,
        c_tai_se,
        w_t_mean,
        w_t_se,
        transductive_nll_mean,
        transductive_nll_se,
        training_nll_mean,
        training_nll_se,
    })
}

/// Monte Carlo estimate of the conditional risk: holds the realized training
/// response fixed and draws fresh prediction responses from `y* | y`.
#[derive(Clone, Debug)]
pub struct ConditionalDraws<T: Scalar> {
    pub draws: usize,
    pub risk_mean: T,
    pub risk_se: T,
}

pub fn conditional_sampling_oracle<T: Scalar>(
    bundle: &CovarianceBundle<T>,
    beta: &DVector<T>,
    data: &DesignData<T>,
    hats: &HatPair<T>,
    draws: usize,
    seed: u64,
) -> Result<ConditionalDraws<T>>
where
    StandardNormal: Distribution<T>,
{
    if draws < 2 {
        return Err(Error::InvalidParameter("at least 2 draws required".into()));
    }
    if beta.len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {} but the design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    let mu = data.x() * beta;
    let mu_star = data.x_star() * beta;
    let cond_mean = &mu_star + &bundle.c * bundle.chol_v.solve_vector(&(data.y() - &mu));
    let vinv_ct = bundle.chol_v.solve_matrix(&bundle.c.transpose());
    let mut sigma_c = &bundle.v_star - &bundle.c * vinv_ct;
    crate::linalg::symmetrize(&mut sigma_c);
    let (_, cond_factor) = CholeskyFactor::decompose(sigma_c, "conditional covariance of y*")?;
    let lower = cond_factor.lower();

    let fit_star = &hats.h_star * data.y();
    let n_star = data.n_star();
    let mut rng = stream_rng(seed, 0, "oracle_conditional");
    let mut nlls = Vec::with_capacity(draws);
    let mut u = DVector::<T>::zeros(n_star);
    for _ in 0..draws {
        for i in 0..n_star {
            u[i] = standard_normal(&mut rng);
        }
        let y_star = &cond_mean + &lower * &u;
        let resid_star = y_star - &fit_star;
        nlls.push(gaussian_neg_loglik(&resid_star, &bundle.chol_r_star));
    }
    let (risk_mean, risk_se) = mean_and_se(&nlls);
    Ok(ConditionalDraws { draws, risk_mean, risk_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{c_tai, w_t};
    use crate::linalg;
    use crate::predict::gls_fit;

    fn small_config() -> SimulationConfig {
        SimulationConfig { subjects: 3, replications: 5, seed: 7, ..SimulationConfig::default() }
    }

    #[test]
    fn generated_dimensions_match_the_design() {
        let config = SimulationConfig { subjects: 10, ..SimulationConfig::default() };
        let rep = generate_replication::<f64>(&config, 0).unwrap();
        assert_eq!(rep.data.n(), 100);
        assert_eq!(rep.data.n_star(), 20);
        assert_eq!(rep.data.p(), 8);
        assert_eq!(rep.data.q(), 20);
        assert_eq!(rep.beta.len(), 8);
        // Time column carries the training grid, prediction rows the
        // extrapolation times.
        assert_eq!(rep.data.x()[(0, TIME_COLUMN)], 1.0);
        assert_eq!(rep.data.x()[(9, TIME_COLUMN)], 10.0);
        assert_eq!(rep.data.x_star()[(0, TIME_COLUMN)], 15.0);
        assert_eq!(rep.data.x_star()[(1, TIME_COLUMN)], 20.0);
        // Random-effect design: intercept and time per subject block.
        assert_eq!(rep.data.z()[(0, 0)], 1.0);
        assert_eq!(rep.data.z()[(0, 1)], 1.0);
        assert_eq!(rep.data.z_star()[(1, 1)], 20.0);
        assert_eq!(rep.data.z_star()[(2, 2)], 1.0);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let config = small_config();
        let a = generate_replication::<f64>(&config, 3).unwrap();
        let b = generate_replication::<f64>(&config, 3).unwrap();
        assert_eq!(a.data.y(), b.data.y());
        assert_eq!(a.data.x(), b.data.x());
        assert_eq!(a.data.y_star(), b.data.y_star());

        let other_rep = generate_replication::<f64>(&config, 4).unwrap();
        assert_ne!(a.data.y(), other_rep.data.y());
        let other_seed = generate_replication::<f64>(
            &SimulationConfig { seed: 8, ..config },
            3,
        )
        .unwrap();
        assert_ne!(a.data.y(), other_seed.data.y());
    }

    #[test]
    fn fixed_covariates_are_shared_across_replications() {
        let config = SimulationConfig { redraw_covariates: false, ..small_config() };
        let a = generate_replication::<f64>(&config, 0).unwrap();
        let b = generate_replication::<f64>(&config, 11).unwrap();
        assert_eq!(a.data.x(), b.data.x());
        assert_eq!(a.data.x_star(), b.data.x_star());
        assert_ne!(a.data.y(), b.data.y());
    }

    #[test]
    fn extrapolated_rows_have_the_stated_marginal_variance() {
        // With the design held fixed, the variance of an extrapolation-row
        // response across replications is var_b1 + t^2 var_b2 + sigma2:
        // 15 + 400 + 15 = 430 at t = 20.
        let config = SimulationConfig {
            subjects: 5,
            replications: 1,
            redraw_covariates: false,
            seed: 42,
            ..SimulationConfig::default()
        };
        let reps = 10_000;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); config.subjects];
        for rep in 0..reps {
            let r = generate_replication::<f64>(&config, rep).unwrap();
            let y_star = r.data.y_star().unwrap();
            for subject in 0..config.subjects {
                // Row layout: two prediction times per subject, t = 20 second.
                samples[subject].push(y_star[2 * subject + 1]);
            }
        }
        let mut mean_var = 0.0;
        for series in &samples {
            let (_, se) = mean_and_se(series);
            let var = se * se * reps as f64;
            mean_var += var / config.subjects as f64;
        }
        assert!(
            (mean_var - 430.0).abs() / 430.0 < 0.02,
            "marginal variance {mean_var} is not within 2% of 430"
        );
    }

    #[test]
    fn candidate_models_are_nested_and_share_rows() {
        let rep = generate_replication::<f64>(&small_config(), 0).unwrap();
        let models = candidate_models(&rep).unwrap();
        assert_eq!(models.len(), 3);
        assert_eq!(models[0].data.p(), 4);
        assert_eq!(models[1].data.p(), 6);
        assert_eq!(models[2].data.p(), 8);
        for m in &models {
            assert_eq!(m.data.y(), rep.data.y());
            assert_eq!(m.data.z(), rep.data.z());
        }
    }

    #[test]
    fn extrapolation_penalty_exceeds_the_in_sample_penalties() {
        // Predicting at times 15 and 20 from training times 1..10 must cost
        // more than the in-sample optimism: c_tai > tr(H)/n > p/n.
        let config = SimulationConfig { subjects: 10, seed: 5, ..SimulationConfig::default() };
        let rep = generate_replication::<f64>(&config, 0).unwrap();
        let bundle = realize(&rep.spec, &rep.data, ResidualMode::Residual).unwrap();
        let hats = hat_matrices(&rep.data, &bundle).unwrap();
        let transductive = c_tai(&bundle, &hats).unwrap();
        let conditional = linalg::trace(&hats.h) / rep.data.n() as f64;
        let marginal = rep.data.p() as f64 / rep.data.n() as f64;
        assert!(
            transductive > conditional && conditional > marginal,
            "expected ordering, got {transductive} vs {conditional} vs {marginal}"
        );
    }

    #[test]
    fn experiment_summary_has_consistent_bookkeeping() {
        let config = SimulationConfig {
            subjects: 3,
            replications: 12,
            seed: 99,
            ..SimulationConfig::default()
        };
        let summary = run_experiment::<f64>(&config).unwrap();
        assert_eq!(summary.records.len(), 12);
        assert!(summary.failed_replications.is_empty());
        for key in ["tAIC", "cAIC", "mAIC", "oracle_conditional", "oracle_expected"] {
            assert!(summary.risk_of_selected.contains_key(key), "missing {key}");
        }
        for name in ["tAIC", "cAIC", "mAIC"] {
            let rate = summary.agreement_rate_conditional[name];
            assert!((0.0..=1.0).contains(&rate));
            // No selector can beat the conditional-oracle floor.
            assert!(
                summary.risk_of_selected[name] >= summary.risk_of_selected["oracle_conditional"]
            );
        }
        // Means over records must match the recorded per-replication values.
        let m3_mean: f64 = summary
            .records
            .iter()
            .map(|r| r.models.iter().find(|m| m.model == "m3").unwrap().tai)
            .sum::<f64>()
            / 12.0;
        assert!((summary.mean_by_model["m3"].tai - m3_mean).abs() < 1e-12);

        // The harness is deterministic end to end.
        let again = run_experiment::<f64>(&config).unwrap();
        assert_eq!(again.records[5].models[2].tai, summary.records[5].models[2].tai);
        assert_eq!(again.risk_of_selected["tAIC"], summary.risk_of_selected["tAIC"]);
    }

    #[test]
    fn sampling_oracle_confirms_the_analytic_penalties() {
        let config = SimulationConfig { subjects: 2, seed: 31, ..SimulationConfig::default() };
        let rep = generate_replication::<f64>(&config, 0).unwrap();
        let bundle = realize(&rep.spec, &rep.data, ResidualMode::Residual).unwrap();
        let hats = hat_matrices(&rep.data, &bundle).unwrap();
        let draws = sampling_oracle(&bundle, &rep.beta, &rep.data, &hats, 4000, 123).unwrap();

        let analytic_penalty = c_tai(&bundle, &hats).unwrap();
        assert!(
            (draws.c_tai_mean - analytic_penalty).abs() < 4.0 * draws.c_tai_se,
            "penalty {analytic_penalty} vs draws {} +- {}",
            draws.c_tai_mean,
            draws.c_tai_se
        );
        let analytic_w = w_t(&bundle, &hats, None).unwrap();
        assert!(
            (draws.w_t_mean - analytic_w).abs() < 4.0 * draws.w_t_se,
            "w_t {analytic_w} vs draws {} +- {}",
            draws.w_t_mean,
            draws.w_t_se
        );
        let analytic_risk =
            oracle_expected_risk(&bundle, &rep.beta, &rep.data, &hats).unwrap();
        assert!(
            (draws.transductive_nll_mean - analytic_risk).abs() < 4.0 * draws.transductive_nll_se
        );

        // Twice the draws shrinks the standard error roughly by sqrt(2).
        let more = sampling_oracle(&bundle, &rep.beta, &rep.data, &hats, 16000, 123).unwrap();
        let ratio = draws.c_tai_se / more.c_tai_se;
        assert!(ratio > 1.4 && ratio < 2.9, "se ratio {ratio} far from 2");
    }

    #[test]
    fn conditional_oracle_draws_match_the_analytic_risk() {
        let config = SimulationConfig { subjects: 2, seed: 77, ..SimulationConfig::default() };
        let rep = generate_replication::<f64>(&config, 1).unwrap();
        let bundle = realize(&rep.spec, &rep.data, ResidualMode::Residual).unwrap();
        let hats = hat_matrices(&rep.data, &bundle).unwrap();
        let analytic =
            oracle_conditional_risk(&bundle, &rep.beta, &rep.data, &hats).unwrap();
        let draws =
            conditional_sampling_oracle(&bundle, &rep.beta, &rep.data, &hats, 4000, 55).unwrap();
        assert!(
            (draws.risk_mean - analytic).abs() < 4.0 * draws.risk_se,
            "conditional risk {analytic} vs draws {} +- {}",
            draws.risk_mean,
            draws.risk_se
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = SimulationConfig::default();
        config.sigma2 = 0.0;
        assert!(config.validate().is_err());
        let mut config = SimulationConfig::default();
        config.beta = vec![1.0; 3];
        assert!(config.validate().is_err());
        let mut config = SimulationConfig::default();
        config.subjects = 0;
        assert!(config.validate().is_err());
        // Too few rows to identify the fixed effects.
        let config = SimulationConfig {
            subjects: 1,
            train_times: vec![1.0, 2.0],
            ..SimulationConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn selection_ever_disagrees_across_criteria() {
        // Sanity check that the three criteria are not trivially identical:
        // over enough replications at least one disagreement appears.
        let config = SimulationConfig {
            subjects: 3,
            replications: 40,
            seed: 2024,
            ..SimulationConfig::default()
        };
        let summary = run_experiment::<f64>(&config).unwrap();
        let disagreement = summary.records.iter().any(|r| {
            r.chosen["tAIC"] != r.chosen["cAIC"] || r.chosen["tAIC"] != r.chosen["mAIC"]
        });
        assert!(disagreement, "tAIC, cAIC, mAIC never disagreed in 40 replications");
    }

    #[test]
    fn gls_fit_recovers_beta_on_average_shapes() {
        // Not a statistical test: just that the full pipeline runs on one
        // replication and produces finite estimates of the right size.
        let rep = generate_replication::<f64>(&small_config(), 2).unwrap();
        let bundle = realize(&rep.spec, &rep.data, ResidualMode::Residual).unwrap();
        let est = gls_fit(&rep.data, &bundle).unwrap();
        assert_eq!(est.beta_hat.len(), 8);
        assert!(est.beta_hat.iter().all(|v| v.is_finite()));
    }
}
