//! TOML run configuration: parsing, validation, and conversion into the
//! library's model and data types.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use taic::data::{FixedEffectSpec, LongSchema, RandomEffectSpec, SpatialSchema};
use taic::model::{CovarianceSpec, KernelSpec, ResidualMode};
use taic::simulate::SimulationConfig;

use crate::CliError;

/// Criterion names accepted in `criteria = [...]`.
pub const KNOWN_CRITERIA: [&str; 4] = ["tAIC", "cAIC", "mAIC", "OptT"];

/// Scale of reported criterion values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputScale {
    /// Per-observation averages, the library's native scale.
    #[default]
    PerObservation,
    /// Classical information-criterion scale: training quantities are
    /// multiplied by `2n`, prediction-side quantities by `2n*`.
    #[serde(rename = "2n")]
    TwoN,
}

/// Top-level run configuration.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub r_mode: ResidualMode,
    #[serde(default)]
    pub output_scale: OutputScale,
    /// Criteria used for selection output; defaults to all of them.
    #[serde(default)]
    pub criteria: Option<Vec<String>>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub split: Option<SplitSection>,
    /// Default random-effect structure for models that do not override it.
    #[serde(default)]
    pub random: Option<RandomSection>,
    /// Default covariance for models that do not override it.
    #[serde(default)]
    pub covariance: Option<CovarianceSection>,
    #[serde(default, rename = "model")]
    pub models: Vec<ModelSection>,
}

/// `[simulate]`: the experiment grid and generator knobs.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_subjects")]
    pub subjects: Vec<usize>,
    #[serde(default = "default_sigma2")]
    pub sigma2: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub var_b1: Option<f64>,
    #[serde(default)]
    pub var_b2: Option<f64>,
    #[serde(default)]
    pub train_times: Option<Vec<f64>>,
    #[serde(default)]
    pub pred_times: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub redraw_covariates: Option<bool>,
    #[serde(default)]
    pub bernoulli_per_subject: Option<bool>,
}

fn default_subjects() -> Vec<usize> {
    vec![10, 20, 30]
}

fn default_sigma2() -> Vec<f64> {
    vec![15.0, 20.0, 25.0]
}

fn default_replications() -> usize {
    200
}

impl SimulateSection {
    /// Expands the grid into one [`SimulationConfig`] per setup, seeding each
    /// from the master seed and its grid position.
    pub fn setups(&self, master_seed: u64) -> Result<Vec<SimulationConfig>, CliError> {
        if self.subjects.is_empty() || self.sigma2.is_empty() {
            return Err(CliError::Config(
                "[simulate] subjects and sigma2 must be nonempty".into(),
            ));
        }
        let base = SimulationConfig::default();
        let mut setups = Vec::new();
        for (i, &subjects) in self.subjects.iter().enumerate() {
            for (j, &sigma2) in self.sigma2.iter().enumerate() {
                let setup_index = (i * self.sigma2.len() + j) as u64;
                let config = SimulationConfig {
                    subjects,
                    sigma2,
                    replications: self.replications,
                    seed: derive_setup_seed(master_seed, setup_index),
                    var_b1: self.var_b1.unwrap_or(base.var_b1),
                    var_b2: self.var_b2.unwrap_or(base.var_b2),
                    train_times: self.train_times.clone().unwrap_or_else(|| base.train_times.clone()),
                    pred_times: self.pred_times.clone().unwrap_or_else(|| base.pred_times.clone()),
                    beta: self.beta.clone().unwrap_or_else(|| base.beta.clone()),
                    redraw_covariates: self.redraw_covariates.unwrap_or(base.redraw_covariates),
                    bernoulli_per_subject: self
                        .bernoulli_per_subject
                        .unwrap_or(base.bernoulli_per_subject),
                };
                config.validate()?;
                setups.push(config);
            }
        }
        Ok(setups)
    }
}

/// Splitmix-style derivation of per-setup seeds from the master seed.
fn derive_setup_seed(master: u64, setup_index: u64) -> u64 {
    let mut z = master ^ setup_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `[data]`: where the table lives and which columns matter.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "format")]
pub enum DataSection {
    Long {
        path: PathBuf,
        id: String,
        time: String,
        response: String,
        #[serde(default)]
        covariates: Vec<String>,
        #[serde(default)]
        log_response: bool,
    },
    Spatial {
        path: PathBuf,
        x: String,
        y: String,
        response: String,
        #[serde(default)]
        covariates: Vec<String>,
        #[serde(default)]
        log_response: bool,
    },
}

impl DataSection {
    pub fn path(&self) -> &Path {
        match self {
            DataSection::Long { path, .. } | DataSection::Spatial { path, .. } => path,
        }
    }

    pub fn long_schema(&self) -> Option<LongSchema> {
        match self {
            DataSection::Long { id, time, response, covariates, log_response, .. } => {
                Some(LongSchema {
                    id: id.clone(),
                    time: time.clone(),
                    response: response.clone(),
                    covariates: covariates.clone(),
                    log_response: *log_response,
                })
            }
            DataSection::Spatial { .. } => None,
        }
    }

    pub fn spatial_schema(&self) -> Option<SpatialSchema> {
        match self {
            DataSection::Spatial { x, y, response, covariates, log_response, .. } => {
                Some(SpatialSchema {
                    x: x.clone(),
                    y: y.clone(),
                    response: response.clone(),
                    covariates: covariates.clone(),
                    log_response: *log_response,
                })
            }
            DataSection::Long { .. } => None,
        }
    }
}

/// `[split]`: how rows are divided into training and prediction sets.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum SplitSection {
    ByTime { holdout_times: Vec<f64> },
    Random { holdout_fraction: f64, seed: Option<u64> },
    /// Pre-split data shipped as two files with identical schemas.
    ByFile { training: PathBuf, prediction: PathBuf },
}

/// `[random]` or a model's `random`: the random-effect structure.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum RandomSection {
    Subjects {
        #[serde(default = "default_true")]
        intercept: bool,
        #[serde(default)]
        slopes: Vec<String>,
    },
    Coordinates {
        #[serde(default)]
        standardize: bool,
    },
}

fn default_true() -> bool {
    true
}

impl RandomSection {
    pub fn to_spec(&self) -> RandomEffectSpec {
        match self {
            RandomSection::Subjects { intercept, slopes } => RandomEffectSpec::Subjects {
                intercept: *intercept,
                slopes: slopes.clone(),
            },
            RandomSection::Coordinates { standardize } => {
                RandomEffectSpec::Coordinates { standardize: *standardize }
            }
        }
    }
}

/// `[covariance]` or a model's `covariance`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum CovarianceSection {
    /// Mixed model: `subject_g` is one subject's random-effect covariance
    /// block, replicated along the diagonal for every subject.
    Lmm { subject_g: Vec<Vec<f64>>, sigma2: f64 },
    /// Mixed model with per-row residual weights taken from a numeric
    /// column: residual variance `sigma2 / weight`.
    WeightedLmm { subject_g: Vec<Vec<f64>>, sigma2: f64, weight_column: String },
    /// Gaussian-process regression with a squared-exponential kernel over
    /// the random-effect design (the coordinates).
    Gpr { sigma_f2: f64, length_scales: Vec<f64>, sigma2: f64 },
    /// Fully explicit covariances.
    Gls { v: Vec<Vec<f64>>, v_star: Vec<Vec<f64>>, c: Vec<Vec<f64>> },
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config(format!("{what} must have at least one row")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what} rows must all have the same nonzero length")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Expands a per-subject covariance block into the full block-diagonal G.
pub fn expand_subject_g(
    block_rows: &[Vec<f64>],
    n_subjects: usize,
    per_subject_dim: usize,
) -> Result<DMatrix<f64>, CliError> {
    let block = matrix_from_rows(block_rows, "subject_g")?;
    if block.nrows() != block.ncols() {
        return Err(CliError::Config(format!(
            "subject_g must be square, got {}x{}",
            block.nrows(),
            block.ncols()
        )));
    }
    if block.nrows() != per_subject_dim {
        return Err(CliError::Config(format!(
            "subject_g is {}x{} but the random-effect structure has {} columns per subject",
            block.nrows(),
            block.ncols(),
            per_subject_dim
        )));
    }
    let q = n_subjects * per_subject_dim;
    let mut g = DMatrix::zeros(q, q);
    for s in 0..n_subjects {
        g.view_mut((s * per_subject_dim, s * per_subject_dim), (per_subject_dim, per_subject_dim))
            .copy_from(&block);
    }
    Ok(g)
}

impl CovarianceSection {
    /// Builds the covariance spec for one model. `weights` carries the
    /// training/prediction weight vectors when a weight column is in play.
    pub fn to_spec(
        &self,
        n_subjects: usize,
        per_subject_dim: usize,
        weights: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<CovarianceSpec<f64>, CliError> {
        match self {
            CovarianceSection::Lmm { subject_g, sigma2 } => Ok(CovarianceSpec::Lmm {
                g: expand_subject_g(subject_g, n_subjects, per_subject_dim)?,
                sigma2: *sigma2,
            }),
            CovarianceSection::WeightedLmm { subject_g, sigma2, .. } => {
                let (w, w_star) = weights.ok_or_else(|| {
                    CliError::Config("weighted-lmm needs a resolvable weight column".into())
                })?;
                Ok(CovarianceSpec::WeightedLmm {
                    g: expand_subject_g(subject_g, n_subjects, per_subject_dim)?,
                    sigma2: *sigma2,
                    weights: DVector::from_vec(w),
                    weights_star: DVector::from_vec(w_star),
                })
            }
            CovarianceSection::Gpr { sigma_f2, length_scales, sigma2 } => Ok(CovarianceSpec::Gpr {
                kernel: KernelSpec::SquaredExponential {
                    sigma_f2: *sigma_f2,
                    length_scales: DVector::from_vec(length_scales.clone()),
                },
                sigma2: *sigma2,
            }),
            CovarianceSection::Gls { v, v_star, c } => Ok(CovarianceSpec::Gls {
                v: matrix_from_rows(v, "v")?,
                v_star: matrix_from_rows(v_star, "v_star")?,
                c: matrix_from_rows(c, "c")?,
            }),
        }
    }

    pub fn weight_column(&self) -> Option<&str> {
        match self {
            CovarianceSection::WeightedLmm { weight_column, .. } => Some(weight_column),
            _ => None,
        }
    }
}

/// One `[[model]]` section.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub id: String,
    pub fixed: FixedSection,
    #[serde(default)]
    pub random: Option<RandomSection>,
    #[serde(default)]
    pub covariance: Option<CovarianceSection>,
}

/// A model's fixed-effect structure.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSection {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub main: Vec<String>,
    #[serde(default)]
    pub interactions: Vec<(String, String)>,
}

impl FixedSection {
    pub fn to_spec(&self) -> FixedEffectSpec {
        FixedEffectSpec {
            intercept: self.intercept,
            main: self.main.clone(),
            interactions: self.interactions.clone(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML file.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            CliError::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.as_ref().display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(criteria) = &self.criteria {
            if criteria.is_empty() {
                return Err(CliError::Config("criteria must not be empty".into()));
            }
            let mut seen = BTreeSet::new();
            for name in criteria {
                if !KNOWN_CRITERIA.contains(&name.as_str()) {
                    return Err(CliError::Config(format!(
                        "unknown criterion '{name}'; expected one of {}",
                        KNOWN_CRITERIA.join(", ")
                    )));
                }
                if !seen.insert(name.as_str()) {
                    return Err(CliError::Config(format!("criterion '{name}' listed twice")));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for model in &self.models {
            if model.id.trim().is_empty() {
                return Err(CliError::Config("model ids must be nonempty".into()));
            }
            if !ids.insert(model.id.as_str()) {
                return Err(CliError::Config(format!("duplicate model id '{}'", model.id)));
            }
        }
        Ok(())
    }

    /// The criteria used for selection output.
    pub fn selection_criteria(&self) -> Vec<String> {
        self.criteria
            .clone()
            .unwrap_or_else(|| KNOWN_CRITERIA.iter().map(|s| s.to_string()).collect())
    }

    /// Demands the sections an evaluation workflow needs.
    pub fn require_evaluation(&self) -> Result<(), CliError> {
        if self.data.is_none() {
            return Err(CliError::Config("this workflow needs a [data] section".into()));
        }
        if self.split.is_none() {
            return Err(CliError::Config("this workflow needs a [split] section".into()));
        }
        if self.models.is_empty() {
            return Err(CliError::Config("this workflow needs at least one [[model]]".into()));
        }
        for model in &self.models {
            if model.random.is_none() && self.random.is_none() {
                return Err(CliError::Config(format!(
                    "model '{}' has no random-effect structure and no [random] default exists",
                    model.id
                )));
            }
            if model.covariance.is_none() && self.covariance.is_none() {
                return Err(CliError::Config(format!(
                    "model '{}' has no covariance and no [covariance] default exists",
                    model.id
                )));
            }
        }
        Ok(())
    }

    /// Demands the `[simulate]` section.
    pub fn require_simulation(&self) -> Result<&SimulateSection, CliError> {
        self.simulate
            .as_ref()
            .ok_or_else(|| CliError::Config("this workflow needs a [simulate] section".into()))
    }
}
