//! The three workflows behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use taic::criteria::{evaluate_model_set, CandidateModel, EvalOptions, SelectionResult};
use taic::data::{
    build_design, build_design_from_tables, build_spatial_design, load_long_csv,
    load_spatial_csv, BuiltDesign, RandomEffectSpec, SplitSpec,
};
use taic::simulate::{run_experiment, ExperimentSummary, ModelCriteria, SimulationConfig};

use crate::config::{DataSection, OutputScale, RandomSection, RunConfig, SplitSection};
use crate::CliError;

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub replications: Option<usize>,
}

/// Output directory resolution: flag, then `TAIC_OUT`, then the config,
/// then `taic-out`.
fn resolve_out_dir(config: &RunConfig, overrides: &Overrides) -> PathBuf {
    overrides
        .out
        .clone()
        .or_else(|| std::env::var_os("TAIC_OUT").map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("taic-out"))
}

/// All floats in CSV output carry 17 significant digits so reruns are
/// byte-comparable and values round-trip exactly.
fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Multipliers turning per-observation values into the configured scale.
#[derive(Clone, Copy, Debug)]
struct Scale {
    train: f64,
    pred: f64,
}

impl Scale {
    fn new(scale: OutputScale, n: usize, n_star: usize) -> Scale {
        match scale {
            OutputScale::PerObservation => Scale { train: 1.0, pred: 1.0 },
            OutputScale::TwoN => Scale { train: 2.0 * n as f64, pred: 2.0 * n_star as f64 },
        }
    }
}

// ---------------------------------------------------------------------------
// simulate

/// Per-setup aggregate written to JSON (the per-replication values live in
/// the setup's CSV).
#[derive(Clone, Debug, Serialize)]
pub struct SetupSummary {
    pub directory: String,
    pub subjects: usize,
    pub sigma2: f64,
    pub replications: usize,
    pub seed: u64,
    pub mean_by_model: BTreeMap<String, ModelCriteria<f64>>,
    pub risk_of_selected: BTreeMap<String, f64>,
    pub agreement_rate_conditional: BTreeMap<String, f64>,
    pub agreement_rate_expected: BTreeMap<String, f64>,
    pub failed_replications: Vec<(usize, String)>,
    pub max_jitter: f64,
    pub jittered_replications: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateManifest {
    pub tool: String,
    pub version: String,
    pub master_seed: u64,
    pub output_scale: String,
    pub setups: Vec<SetupManifestEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SetupManifestEntry {
    pub directory: String,
    pub subjects: usize,
    pub sigma2: f64,
    pub replications: usize,
    pub seed: u64,
    pub failed: usize,
    pub max_jitter: f64,
    pub jittered_replications: usize,
}

/// Outcome of `taic simulate`.
#[derive(Clone, Debug)]
pub struct SimulateOutcome {
    pub out_dir: PathBuf,
    pub setup_dirs: Vec<PathBuf>,
    pub summaries: Vec<SetupSummary>,
}

fn setup_dir_name(config: &SimulationConfig) -> String {
    format!("S{}_sigma{}", config.subjects, config.sigma2)
}

fn scale_model_criteria(m: &ModelCriteria<f64>, scale: Scale) -> ModelCriteria<f64> {
    ModelCriteria {
        model: m.model.clone(),
        tai: m.tai * scale.train,
        cai: m.cai * scale.train,
        mai: m.mai * scale.train,
        oracle_conditional: m.oracle_conditional * scale.pred,
        oracle_expected: m.oracle_expected * scale.pred,
    }
}

fn write_replications_csv(
    path: &Path,
    summary: &ExperimentSummary<f64>,
    scale: Scale,
) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["replication", "model", "criterion", "value"])?;
    for record in &summary.records {
        for m in &record.models {
            let rows = [
                ("tai", m.tai * scale.train),
                ("cai", m.cai * scale.train),
                ("mai", m.mai * scale.train),
                ("oracle_conditional_risk", m.oracle_conditional * scale.pred),
                ("oracle_expected_risk", m.oracle_expected * scale.pred),
            ];
            for (criterion, value) in rows {
                writer.write_record([
                    record.replication.to_string(),
                    m.model.clone(),
                    criterion.to_string(),
                    format_value(value),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn setup_summary(
    directory: String,
    config: &SimulationConfig,
    summary: &ExperimentSummary<f64>,
    scale: Scale,
) -> SetupSummary {
    SetupSummary {
        directory,
        subjects: config.subjects,
        sigma2: config.sigma2,
        replications: config.replications,
        seed: config.seed,
        mean_by_model: summary
            .mean_by_model
            .iter()
            .map(|(k, v)| (k.clone(), scale_model_criteria(v, scale)))
            .collect(),
        risk_of_selected: summary
            .risk_of_selected
            .iter()
            .map(|(k, v)| (k.clone(), v * scale.pred))
            .collect(),
        agreement_rate_conditional: summary.agreement_rate_conditional.clone(),
        agreement_rate_expected: summary.agreement_rate_expected.clone(),
        failed_replications: summary.failed_replications.clone(),
        max_jitter: summary.max_jitter,
        jittered_replications: summary.jittered_replications,
    }
}

fn write_json<P: AsRef<Path>, V: Serialize>(path: P, value: &V) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs the configured simulation grid and writes one directory per setup.
pub fn cmd_simulate(config: &RunConfig, overrides: &Overrides) -> Result<SimulateOutcome, CliError> {
    let section = config.require_simulation()?;
    let mut section = section.clone();
    if let Some(reps) = overrides.replications {
        section.replications = reps;
    }
    let master_seed = overrides.seed.or(config.seed).unwrap_or(1729);
    let setups = section.setups(master_seed)?;

    let out_dir = resolve_out_dir(config, overrides);
    std::fs::create_dir_all(&out_dir)?;

    let mut setup_dirs = Vec::new();
    let mut summaries = Vec::new();
    let mut manifest_entries = Vec::new();
    for setup in &setups {
        let summary = run_experiment::<f64>(setup)?;
        let scale = Scale::new(config.output_scale, setup.n(), setup.n_star());
        let dir_name = setup_dir_name(setup);
        let dir = out_dir.join(&dir_name);
        std::fs::create_dir_all(&dir)?;
        write_replications_csv(&dir.join("replications.csv"), &summary, scale)?;
        let aggregate = setup_summary(dir_name.clone(), setup, &summary, scale);
        write_json(dir.join("summary.json"), &aggregate)?;
        manifest_entries.push(SetupManifestEntry {
            directory: dir_name,
            subjects: setup.subjects,
            sigma2: setup.sigma2,
            replications: setup.replications,
            seed: setup.seed,
            failed: summary.failed_replications.len(),
            max_jitter: summary.max_jitter,
            jittered_replications: summary.jittered_replications,
        });
        summaries.push(aggregate);
        setup_dirs.push(dir);
    }
    let manifest = SimulateManifest {
        tool: "taic".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        master_seed,
        output_scale: match config.output_scale {
            OutputScale::PerObservation => "per-observation".into(),
            OutputScale::TwoN => "2n".into(),
        },
        setups: manifest_entries,
    };
    write_json(out_dir.join("manifest.json"), &manifest)?;
    write_json(out_dir.join("summary.json"), &summaries)?;
    Ok(SimulateOutcome { out_dir, setup_dirs, summaries })
}

// ---------------------------------------------------------------------------
// evaluate / select

/// The candidate set assembled from `[data]`, `[split]`, and `[[model]]`.
#[derive(Clone, Debug)]
pub struct BuiltCandidates {
    pub models: Vec<CandidateModel<f64>>,
    pub fixed_names: Vec<Vec<String>>,
    pub n: usize,
    pub n_star: usize,
    pub response_label: String,
}

fn random_section_for<'c>(
    config: &'c RunConfig,
    model_random: &'c Option<RandomSection>,
    model_id: &str,
) -> Result<&'c RandomSection, CliError> {
    model_random.as_ref().or(config.random.as_ref()).ok_or_else(|| {
        CliError::Config(format!("model '{model_id}' has no random-effect structure"))
    })
}

fn split_seed(section: &SplitSection, config: &RunConfig, overrides: &Overrides) -> u64 {
    match section {
        SplitSection::Random { seed: Some(seed), .. } => *seed,
        _ => overrides.seed.or(config.seed).unwrap_or(0),
    }
}

/// Builds every candidate model from the configured table and split.
pub fn build_candidates(
    config: &RunConfig,
    overrides: &Overrides,
) -> Result<BuiltCandidates, CliError> {
    config.require_evaluation()?;
    let data_section = config.data.as_ref().expect("validated");
    let split_section = config.split.as_ref().expect("validated");

    let mut models = Vec::new();
    let mut fixed_names = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut response_label = String::new();

    match data_section {
        DataSection::Long { .. } => {
            let schema = data_section.long_schema().expect("long section");
            let split = match split_section {
                SplitSection::ByTime { holdout_times } => {
                    Some(SplitSpec::ByTime { holdout_times: holdout_times.clone() })
                }
                SplitSection::Random { holdout_fraction, .. } => Some(SplitSpec::Random {
                    holdout_fraction: *holdout_fraction,
                    seed: split_seed(split_section, config, overrides),
                }),
                SplitSection::ByFile { .. } => None,
            };
            let tables = match split_section {
                SplitSection::ByFile { training, prediction } => Some((
                    load_long_csv(training, &schema)?,
                    load_long_csv(prediction, &schema)?,
                )),
                _ => None,
            };
            let table = match &tables {
                None => Some(load_long_csv(data_section.path(), &schema)?),
                Some(_) => None,
            };

            for model in &config.models {
                let random = random_section_for(config, &model.random, &model.id)?;
                let random_spec = random.to_spec();
                let fixed = model.fixed.to_spec();
                let built: BuiltDesign<f64> = match (&table, &tables) {
                    (Some(table), None) => build_design(
                        table,
                        &fixed,
                        &random_spec,
                        split.as_ref().expect("single-table split"),
                    )?,
                    (None, Some((train, pred))) => {
                        build_design_from_tables(train, pred, &fixed, &random_spec)?
                    }
                    _ => unreachable!("exactly one source"),
                };
                response_label = built.response_label.clone();
                push_candidate(
                    config,
                    model,
                    built,
                    |col| match &table {
                        Some(t) => t.numeric_column(col).map_err(CliError::from),
                        None => {
                            let (train, pred) = tables.as_ref().expect("two tables");
                            let mut w = train.numeric_column(col)?;
                            w.extend(pred.numeric_column(col)?);
                            Ok(w)
                        }
                    },
                    &mut models,
                    &mut fixed_names,
                    &mut dims,
                )?;
            }
        }
        DataSection::Spatial { .. } => {
            let schema = data_section.spatial_schema().expect("spatial section");
            let table = load_spatial_csv(data_section.path(), &schema)?;
            let split = match split_section {
                SplitSection::ByTime { holdout_times } => {
                    SplitSpec::ByTime { holdout_times: holdout_times.clone() }
                }
                SplitSection::Random { holdout_fraction, .. } => SplitSpec::Random {
                    holdout_fraction: *holdout_fraction,
                    seed: split_seed(split_section, config, overrides),
                },
                SplitSection::ByFile { .. } => {
                    return Err(CliError::Config(
                        "by-file splits are supported for long tables only".into(),
                    ))
                }
            };
            for model in &config.models {
                let random = random_section_for(config, &model.random, &model.id)?;
                let standardize = match random.to_spec() {
                    RandomEffectSpec::Coordinates { standardize } => standardize,
                    RandomEffectSpec::Subjects { .. } => {
                        return Err(CliError::Config(format!(
                            "model '{}': spatial tables use coordinate random effects",
                            model.id
                        )))
                    }
                };
                let fixed = model.fixed.to_spec();
                let built: BuiltDesign<f64> =
                    build_spatial_design(&table, &fixed, standardize, &split)?;
                response_label = built.response_label.clone();
                let t = &table;
                push_candidate(
                    config,
                    model,
                    built,
                    |col| t.numeric_column(col).map_err(CliError::from),
                    &mut models,
                    &mut fixed_names,
                    &mut dims,
                )?;
            }
        }
    }
    let (n, n_star) = dims.expect("at least one model was built");
    Ok(BuiltCandidates { models, fixed_names, n, n_star, response_label })
}

/// Resolves the covariance for one built design and records the candidate.
fn push_candidate(
    config: &RunConfig,
    model: &crate::config::ModelSection,
    built: BuiltDesign<f64>,
    numeric_column: impl Fn(&str) -> Result<Vec<f64>, CliError>,
    models: &mut Vec<CandidateModel<f64>>,
    fixed_names: &mut Vec<Vec<String>>,
    dims: &mut Option<(usize, usize)>,
) -> Result<(), CliError> {
    let covariance = model
        .covariance
        .as_ref()
        .or(config.covariance.as_ref())
        .ok_or_else(|| CliError::Config(format!("model '{}' has no covariance", model.id)))?;
    let weights = match covariance.weight_column() {
        Some(col) => {
            let all = numeric_column(col)?;
            let take = |rows: &[usize]| rows.iter().map(|&i| all[i]).collect::<Vec<f64>>();
            Some((take(&built.train_rows), take(&built.pred_rows)))
        }
        None => None,
    };
    let spec = covariance.to_spec(built.n_subjects, built.per_subject_dim, weights)?;
    if let Some((n, n_star)) = dims {
        if built.data.n() != *n || built.data.n_star() != *n_star {
            return Err(CliError::Config(format!(
                "model '{}' splits into {}/{} rows but an earlier model got {}/{}",
                model.id,
                built.data.n(),
                built.data.n_star(),
                n,
                n_star
            )));
        }
    } else {
        *dims = Some((built.data.n(), built.data.n_star()));
    }
    fixed_names.push(built.fixed_names.clone());
    models.push(CandidateModel { id: model.id.clone(), data: built.data, spec });
    Ok(())
}

/// One row of the evaluation table, on the configured output scale.
#[derive(Clone, Debug, Serialize)]
pub struct EvaluateRow {
    pub model: String,
    pub neg_loglik: f64,
    pub c_tai: f64,
    pub tai: f64,
    pub cai: f64,
    pub mai: f64,
    pub w_t: f64,
    pub loss_opt_t: f64,
    pub mahalanobis_correction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_neg_loglik: Option<f64>,
    pub jitter: f64,
}

/// Outcome of `taic evaluate`.
#[derive(Clone, Debug)]
pub struct EvaluateOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<EvaluateRow>,
    pub selection: SelectionResult<f64>,
    pub n: usize,
    pub n_star: usize,
    pub response_label: String,
}

fn evaluate_candidates(
    config: &RunConfig,
    overrides: &Overrides,
) -> Result<(BuiltCandidates, SelectionResult<f64>), CliError> {
    let candidates = build_candidates(config, overrides)?;
    let options = EvalOptions { r_mode: config.r_mode, oracle: None };
    let selection = evaluate_model_set(&candidates.models, &options)?;
    Ok((candidates, selection))
}

fn evaluation_rows(
    candidates: &BuiltCandidates,
    selection: &SelectionResult<f64>,
    output_scale: OutputScale,
) -> Vec<EvaluateRow> {
    let scale = Scale::new(output_scale, candidates.n, candidates.n_star);
    selection
        .reports
        .iter()
        .map(|r| EvaluateRow {
            model: r.id.clone(),
            neg_loglik: r.report.neg_loglik_train * scale.train,
            c_tai: r.report.c_tai * scale.train,
            tai: r.report.tai * scale.train,
            cai: r.report.cai * scale.train,
            mai: r.report.mai * scale.train,
            // Squared-error quantities stay per-observation on any scale.
            w_t: r.report.w_t,
            loss_opt_t: r.report.loss_opt_t,
            mahalanobis_correction: r.report.mahalanobis_correction,
            holdout_neg_loglik: r.holdout_neg_loglik.map(|v| v * scale.pred),
            jitter: r.report.jitter_applied,
        })
        .collect()
}

fn write_evaluation_csv(path: &Path, rows: &[EvaluateRow]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "model",
        "neg_loglik",
        "c_tai",
        "tai",
        "cai",
        "mai",
        "w_t",
        "loss_opt_t",
        "mahalanobis_correction",
        "holdout_neg_loglik",
        "jitter",
    ])?;
    for row in rows {
        writer.write_record([
            row.model.clone(),
            format_value(row.neg_loglik),
            format_value(row.c_tai),
            format_value(row.tai),
            format_value(row.cai),
            format_value(row.mai),
            format_value(row.w_t),
            format_value(row.loss_opt_t),
            format_value(row.mahalanobis_correction),
            row.holdout_neg_loglik.map(format_value).unwrap_or_default(),
            format_value(row.jitter),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Scores every configured model and writes the criterion table.
pub fn cmd_evaluate(config: &RunConfig, overrides: &Overrides) -> Result<EvaluateOutcome, CliError> {
    let (candidates, selection) = evaluate_candidates(config, overrides)?;
    let rows = evaluation_rows(&candidates, &selection, config.output_scale);
    let out_dir = resolve_out_dir(config, overrides);
    std::fs::create_dir_all(&out_dir)?;
    write_evaluation_csv(&out_dir.join("criteria.csv"), &rows)?;
    write_json(out_dir.join("criteria.json"), &rows)?;
    Ok(EvaluateOutcome {
        out_dir,
        rows,
        selection,
        n: candidates.n,
        n_star: candidates.n_star,
        response_label: candidates.response_label,
    })
}

/// What `taic select` writes to `selection.json`.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionDocument {
    pub criteria: Vec<String>,
    pub chosen: BTreeMap<String, String>,
    /// Criteria on which several models tie exactly; selection fell to the
    /// first of the listed models.
    pub ties: BTreeMap<String, Vec<String>>,
    pub models: Vec<String>,
    pub table: Vec<EvaluateRow>,
}

/// Outcome of `taic select`.
#[derive(Clone, Debug)]
pub struct SelectOutcome {
    pub out_dir: PathBuf,
    pub document: SelectionDocument,
}

/// Runs evaluation and reports the argmin model per configured criterion.
pub fn cmd_select(config: &RunConfig, overrides: &Overrides) -> Result<SelectOutcome, CliError> {
    let (candidates, selection) = evaluate_candidates(config, overrides)?;
    let rows = evaluation_rows(&candidates, &selection, config.output_scale);
    let wanted = config.selection_criteria();
    let chosen: BTreeMap<String, String> = selection
        .chosen
        .iter()
        .filter(|(name, _)| wanted.iter().any(|w| w == *name))
        .map(|(name, id)| (name.clone(), id.clone()))
        .collect();
    let ties: BTreeMap<String, Vec<String>> = selection
        .ties
        .iter()
        .filter(|(name, _)| wanted.iter().any(|w| w == *name))
        .map(|(name, ids)| (name.clone(), ids.clone()))
        .collect();
    let document = SelectionDocument {
        criteria: wanted,
        chosen,
        ties,
        models: selection.reports.iter().map(|r| r.id.clone()).collect(),
        table: rows,
    };
    let out_dir = resolve_out_dir(config, overrides);
    std::fs::create_dir_all(&out_dir)?;
    write_json(out_dir.join("selection.json"), &document)?;
    Ok(SelectOutcome { out_dir, document })
}
