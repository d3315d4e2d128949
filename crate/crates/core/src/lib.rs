//! Transductive prediction-error criteria and BLUP model selection for
//! Gaussian linear models.
//!
//! Given a training design and a (possibly dependent) prediction design, the
//! crate realizes the joint covariance structure of a linear mixed model,
//! a Gaussian-process regression, or a plain GLS model, fits the fixed
//! effects by generalized least squares, forms the BLUP hat matrices, and
//! scores each candidate model with the transductive criterion `tai`
//! alongside the in-sample baselines `cai` and `mai` and the squared-error
//! criterion `loss_opt_t`. A simulation harness and long/spatial table
//! loaders support end-to-end selection experiments.
//!
//! Everything numeric is generic over the scalar type via [`Scalar`]
//! (satisfied by `f32` and `f64`); the type aliases at the crate root fix
//! `f64` for ordinary use.

pub mod criteria;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod scalar;
pub mod simulate;

pub use criteria::{
    c_tai, c_tai_biased, c_tai_gls, cai, criterion_report, evaluate_model_set,
    gaussian_neg_loglik, holdout_neg_loglik, loss_opt_t, mahalanobis_correction, mai,
    oracle_conditional_risk, oracle_expected_risk, tai, training_neg_loglik, w_t,
    CandidateModel, CriterionReport,
    EvalOptions, ModelReport, OracleModel, SelectionResult, BIAS_DEFECT_TOL, CRITERION_NAMES,
};
pub use data::{
    build_design, build_design_from_tables, build_spatial_design, load_long_csv,
    load_spatial_csv, write_long_csv, write_spatial_csv, BuiltDesign, DataError,
    FixedEffectSpec, LongSchema, LongTable, RandomEffectSpec, SpatialSchema, SpatialTable,
    SplitSpec,
};
pub use error::{Error, Result};
pub use linalg::CholeskyFactor;
pub use model::{
    kernel_matrix, realize, CovarianceBundle, CovarianceSpec, DesignData, KernelSpec,
    ResidualMode,
};
pub use predict::{gls_fit, hat_matrices, GlsEstimate, HatPair};
pub use scalar::Scalar;
pub use simulate::{
    candidate_models, conditional_sampling_oracle, generate_replication, run_experiment,
    sampling_oracle, ExperimentSummary, Replication, SimulationConfig,
};

/// Design pair with `f64` entries.
pub type Design = model::DesignData<f64>;
/// Covariance specification with `f64` entries.
pub type Covariance = model::CovarianceSpec<f64>;
/// Realized covariance bundle with `f64` entries.
pub type Bundle = model::CovarianceBundle<f64>;
/// Hat-matrix pair with `f64` entries.
pub type Hats = predict::HatPair<f64>;
/// Criterion report with `f64` entries.
pub type Report = criteria::CriterionReport<f64>;
