//! Loading observational tables and turning them into design pairs.
//!
//! Two table shapes are supported: *long* tables (subject id, observation
//! time, response, covariates — repeated-measures data) and *spatial*
//! tables (two coordinates, response, covariates — kriging data). Either is
//! split into training and prediction rows, the fixed-effect matrix is built
//! with dummy coding and optional interactions, and the random-effect design
//! is either per-subject blocks (long) or the coordinates themselves
//! (spatial, feeding a kernel).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DesignData;
use crate::scalar::Scalar;

/// Errors raised while reading tables or assembling designs from them.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column '{column}' not found in the header")]
    MissingColumn { column: String },
    #[error("row {row}: cannot parse '{value}' in column '{column}' as a number")]
    MalformedNumber { row: u64, column: String, value: String },
    #[error("row {row}: column '{column}' is empty")]
    MissingValue { row: u64, column: String },
    #[error("duplicate observation for subject '{id}' at time {time}")]
    DuplicateObservation { id: String, time: f64 },
    #[error("training row for subject '{id}' at time {time} has no response")]
    MissingResponse { id: String, time: f64 },
    #[error("prediction rows contain level '{level}' of '{column}' never seen in training")]
    UnseenLevel { column: String, level: String },
    #[error("prediction rows contain subject '{id}' never seen in training")]
    UnseenSubject { id: String },
    #[error("the {which} partition is empty")]
    EmptyPartition { which: &'static str },
    #[error("column '{column}' is not numeric")]
    NotNumeric { column: String },
    #[error("tables disagree: {0}")]
    SchemaMismatch(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] crate::error::Error),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

/// A table cell: numeric when it parses as one, categorical otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Number(f64),
    Category(String),
}

impl CellValue {
    fn parse(raw: &str) -> CellValue {
        let trimmed = raw.trim();
        match trimmed.parse::<f64>() {
            Ok(v) => CellValue::Number(v),
            Err(_) => CellValue::Category(trimmed.to_string()),
        }
    }

    /// Canonical display form, used as the level name in dummy coding.
    fn level(&self) -> String {
        match self {
            CellValue::Number(v) => v.to_string(),
            CellValue::Category(s) => s.clone(),
        }
    }
}

/// Column names of a long (repeated-measures) table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LongSchema {
    pub id: String,
    pub time: String,
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Replace the response by its natural logarithm at load time.
    #[serde(default)]
    pub log_response: bool,
}

/// Column names of a spatial table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpatialSchema {
    pub x: String,
    pub y: String,
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub log_response: bool,
}

/// One observation of a long table.
#[derive(Clone, Debug, PartialEq)]
pub struct LongRow {
    pub id: String,
    pub time: f64,
    pub response: Option<f64>,
    pub covariates: Vec<CellValue>,
}

/// A parsed long table. `response_label` records any load-time transform.
#[derive(Clone, Debug, PartialEq)]
pub struct LongTable {
    pub id_name: String,
    pub time_name: String,
    pub response_name: String,
    pub response_label: String,
    pub covariate_names: Vec<String>,
    pub rows: Vec<LongRow>,
}

/// One observation of a spatial table.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRow {
    pub coords: [f64; 2],
    pub response: Option<f64>,
    pub covariates: Vec<CellValue>,
}

/// A parsed spatial table.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTable {
    pub x_name: String,
    pub y_name: String,
    pub response_name: String,
    pub response_label: String,
    pub covariate_names: Vec<String>,
    pub rows: Vec<SpatialRow>,
}

fn header_index(headers: &csv::StringRecord, column: &str) -> DataResult<usize> {
    headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| DataError::MissingColumn { column: column.to_string() })
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_required_number(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
) -> DataResult<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    if raw.is_empty() {
        return Err(DataError::MissingValue { row: row_line(record), column: column.to_string() });
    }
    raw.parse::<f64>().map_err(|_| DataError::MalformedNumber {
        row: row_line(record),
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Empty cells and the literal `NA` mark a missing response.
fn parse_response(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    log_transform: bool,
) -> DataResult<Option<f64>> {
    let raw = record.get(idx).unwrap_or("").trim();
    if raw.is_empty() || raw == "NA" {
        return Ok(None);
    }
    let value = raw.parse::<f64>().map_err(|_| DataError::MalformedNumber {
        row: row_line(record),
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if log_transform {
        if value <= 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "cannot log-transform nonpositive response {value} (row {})",
                row_line(record)
            )));
        }
        Ok(Some(value.ln()))
    } else {
        Ok(Some(value))
    }
}

fn parse_covariates(
    record: &csv::StringRecord,
    indices: &[usize],
    names: &[String],
) -> DataResult<Vec<CellValue>> {
    indices
        .iter()
        .zip(names)
        .map(|(&idx, name)| {
            let raw = record.get(idx).unwrap_or("").trim();
            if raw.is_empty() {
                Err(DataError::MissingValue { row: row_line(record), column: name.clone() })
            } else {
                Ok(CellValue::parse(raw))
            }
        })
        .collect()
}

fn response_label(name: &str, log_transform: bool) -> String {
    if log_transform {
        format!("log({name})")
    } else {
        name.to_string()
    }
}

/// Reads a long table from a headered CSV file.
pub fn load_long_csv<P: AsRef<Path>>(path: P, schema: &LongSchema) -> DataResult<LongTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_idx = header_index(&headers, &schema.id)?;
    let time_idx = header_index(&headers, &schema.time)?;
    let response_idx = header_index(&headers, &schema.response)?;
    let cov_indices: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| header_index(&headers, c))
        .collect::<DataResult<_>>()?;

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(id_idx).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(DataError::MissingValue {
                row: row_line(&record),
                column: schema.id.clone(),
            });
        }
        let time = parse_required_number(&record, time_idx, &schema.time)?;
        if !seen.insert((id.clone(), time.to_bits())) {
            return Err(DataError::DuplicateObservation { id, time });
        }
        let response = parse_response(&record, response_idx, &schema.response, schema.log_response)?;
        let covariates = parse_covariates(&record, &cov_indices, &schema.covariates)?;
        rows.push(LongRow { id, time, response, covariates });
    }
    Ok(LongTable {
        id_name: schema.id.clone(),
        time_name: schema.time.clone(),
        response_name: schema.response.clone(),
        response_label: response_label(&schema.response, schema.log_response),
        covariate_names: schema.covariates.clone(),
        rows,
    })
}

/// Reads a spatial table from a headered CSV file.
pub fn load_spatial_csv<P: AsRef<Path>>(
    path: P,
    schema: &SpatialSchema,
) -> DataResult<SpatialTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let x_idx = header_index(&headers, &schema.x)?;
    let y_idx = header_index(&headers, &schema.y)?;
    let response_idx = header_index(&headers, &schema.response)?;
    let cov_indices: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| header_index(&headers, c))
        .collect::<DataResult<_>>()?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let x = parse_required_number(&record, x_idx, &schema.x)?;
        let y = parse_required_number(&record, y_idx, &schema.y)?;
        let response = parse_response(&record, response_idx, &schema.response, schema.log_response)?;
        let covariates = parse_covariates(&record, &cov_indices, &schema.covariates)?;
        rows.push(SpatialRow { coords: [x, y], response, covariates });
    }
    Ok(SpatialTable {
        x_name: schema.x.clone(),
        y_name: schema.y.clone(),
        response_name: schema.response.clone(),
        response_label: response_label(&schema.response, schema.log_response),
        covariate_names: schema.covariates.clone(),
        rows,
    })
}

fn cell_to_field(cell: &CellValue) -> String {
    cell.level()
}

/// Writes a long table back to CSV (missing responses become empty cells).
pub fn write_long_csv<P: AsRef<Path>>(path: P, table: &LongTable) -> DataResult<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![table.id_name.clone(), table.time_name.clone(), table.response_name.clone()];
    header.extend(table.covariate_names.iter().cloned());
    writer.write_record(&header)?;
    for row in &table.rows {
        let mut record = vec![
            row.id.clone(),
            row.time.to_string(),
            row.response.map(|v| v.to_string()).unwrap_or_default(),
        ];
        record.extend(row.covariates.iter().map(cell_to_field));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a spatial table back to CSV.
pub fn write_spatial_csv<P: AsRef<Path>>(path: P, table: &SpatialTable) -> DataResult<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![table.x_name.clone(), table.y_name.clone(), table.response_name.clone()];
    header.extend(table.covariate_names.iter().cloned());
    writer.write_record(&header)?;
    for row in &table.rows {
        let mut record = vec![
            row.coords[0].to_string(),
            row.coords[1].to_string(),
            row.response.map(|v| v.to_string()).unwrap_or_default(),
        ];
        record.extend(row.covariates.iter().map(cell_to_field));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

impl LongTable {
    /// Extracts a covariate column as numbers; errors on any non-numeric
    /// cell. Useful for weight columns.
    pub fn numeric_column(&self, name: &str) -> DataResult<Vec<f64>> {
        let idx = self
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn { column: name.to_string() })?;
        self.rows
            .iter()
            .map(|row| match &row.covariates[idx] {
                CellValue::Number(v) => Ok(*v),
                CellValue::Category(_) => Err(DataError::NotNumeric { column: name.to_string() }),
            })
            .collect()
    }
}

impl SpatialTable {
    pub fn numeric_column(&self, name: &str) -> DataResult<Vec<f64>> {
        let idx = self
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn { column: name.to_string() })?;
        self.rows
            .iter()
            .map(|row| match &row.covariates[idx] {
                CellValue::Number(v) => Ok(*v),
                CellValue::Category(_) => Err(DataError::NotNumeric { column: name.to_string() }),
            })
            .collect()
    }
}

/// How to split a single table into training and prediction rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// Rows whose time matches one of these values are held out.
    ByTime { holdout_times: Vec<f64> },
    /// A random fraction of rows is held out, reproducibly.
    Random { holdout_fraction: f64, seed: u64 },
}

/// Fixed-effect structure: optional intercept, main terms, and pairwise
/// interactions. Terms name covariate columns; `time` (long tables) and
/// `x`/`y` (spatial tables) address the built-in columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedEffectSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub main: Vec<String>,
    #[serde(default)]
    pub interactions: Vec<(String, String)>,
}

fn default_true() -> bool {
    true
}

impl Default for FixedEffectSpec {
    fn default() -> Self {
        FixedEffectSpec { intercept: true, main: Vec::new(), interactions: Vec::new() }
    }
}

/// Random-effect structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RandomEffectSpec {
    /// One block per subject: an optional random intercept plus random
    /// slopes in the named numeric terms (`time` or numeric covariates).
    Subjects {
        #[serde(default = "default_true")]
        intercept: bool,
        #[serde(default)]
        slopes: Vec<String>,
    },
    /// The two coordinates, optionally standardized by the training rows;
    /// used as kernel inputs for spatial models.
    Coordinates {
        #[serde(default)]
        standardize: bool,
    },
}

/// A design pair assembled from a table, with naming metadata.
#[derive(Clone, Debug)]
pub struct BuiltDesign<T: Scalar> {
    pub data: DesignData<T>,
    /// Names of the fixed-effect columns, in order.
    pub fixed_names: Vec<String>,
    /// Distinct training subjects (0 for coordinate designs).
    pub n_subjects: usize,
    /// Random-effect columns per subject (0 for coordinate designs).
    pub per_subject_dim: usize,
    pub response_label: String,
    /// Indices of the training rows in the source table.
    pub train_rows: Vec<usize>,
    /// Indices of the prediction rows in the source table.
    pub pred_rows: Vec<usize>,
}

fn times_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn split_rows(
    n_rows: usize,
    times: Option<&[f64]>,
    split: &SplitSpec,
) -> DataResult<(Vec<usize>, Vec<usize>)> {
    let (train, pred): (Vec<usize>, Vec<usize>) = match split {
        SplitSpec::ByTime { holdout_times } => {
            let times = times.ok_or_else(|| {
                DataError::InvalidSpec("a by-time split needs a table with a time column".into())
            })?;
            if holdout_times.is_empty() {
                return Err(DataError::InvalidSpec("holdout_times is empty".into()));
            }
            (0..n_rows).partition(|&i| !holdout_times.iter().any(|&h| times_match(times[i], h)))
        }
        SplitSpec::Random { holdout_fraction, seed } => {
            if !(*holdout_fraction > 0.0 && *holdout_fraction < 1.0) {
                return Err(DataError::InvalidSpec(format!(
                    "holdout_fraction must be in (0, 1), got {holdout_fraction}"
                )));
            }
            let k = ((n_rows as f64) * holdout_fraction).round() as usize;
            let k = k.clamp(1, n_rows.saturating_sub(1));
            let mut indices: Vec<usize> = (0..n_rows).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(*seed);
            indices.shuffle(&mut rng);
            let mut holdout: Vec<usize> = indices[..k].to_vec();
            let mut train: Vec<usize> = indices[k..].to_vec();
            holdout.sort_unstable();
            train.sort_unstable();
            (train, holdout)
        }
    };
    if train.is_empty() {
        return Err(DataError::EmptyPartition { which: "training" });
    }
    if pred.is_empty() {
        return Err(DataError::EmptyPartition { which: "prediction" });
    }
    Ok((train, pred))
}

/// A resolved fixed-effect term: one or more named numeric columns over the
/// training and prediction rows.
struct ResolvedTerm {
    columns: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Generic view of a table that the design builder works against.
struct TableView<'a> {
    covariate_names: &'a [String],
    /// covariate cells per row
    cells: Vec<&'a [CellValue]>,
    /// built-in numeric columns (`time`, or `x`/`y`)
    builtins: BTreeMap<&'static str, Vec<f64>>,
    responses: Vec<Option<f64>>,
    /// subject ids (long tables only)
    ids: Option<Vec<&'a str>>,
}

impl<'a> TableView<'a> {
    fn from_long(table: &'a LongTable) -> TableView<'a> {
        let mut builtins = BTreeMap::new();
        builtins.insert("time", table.rows.iter().map(|r| r.time).collect());
        TableView {
            covariate_names: &table.covariate_names,
            cells: table.rows.iter().map(|r| r.covariates.as_slice()).collect(),
            builtins,
            responses: table.rows.iter().map(|r| r.response).collect(),
            ids: Some(table.rows.iter().map(|r| r.id.as_str()).collect()),
        }
    }

    fn from_spatial(table: &'a SpatialTable) -> TableView<'a> {
        let mut builtins = BTreeMap::new();
        builtins.insert("x", table.rows.iter().map(|r| r.coords[0]).collect::<Vec<_>>());
        builtins.insert("y", table.rows.iter().map(|r| r.coords[1]).collect::<Vec<_>>());
        TableView {
            covariate_names: &table.covariate_names,
            cells: table.rows.iter().map(|r| r.covariates.as_slice()).collect(),
            builtins,
            responses: table.rows.iter().map(|r| r.response).collect(),
            ids: None,
        }
    }

    fn covariate_index(&self, name: &str) -> DataResult<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn { column: name.to_string() })
    }

    /// Resolves a term name into numeric columns over the two partitions.
    /// Numeric covariates and builtins give a single column; categorical
    /// covariates expand to dummy columns against the lexicographically
    /// first training level.
    fn resolve_term(
        &self,
        name: &str,
        train: &[usize],
        pred: &[usize],
    ) -> DataResult<ResolvedTerm> {
        if let Some(values) = self.builtins.get(name) {
            return Ok(ResolvedTerm {
                columns: vec![(
                    name.to_string(),
                    train.iter().map(|&i| values[i]).collect(),
                    pred.iter().map(|&i| values[i]).collect(),
                )],
            });
        }
        let idx = self.covariate_index(name)?;
        let numeric = train
            .iter()
            .chain(pred.iter())
            .all(|&i| matches!(self.cells[i][idx], CellValue::Number(_)));
        if numeric {
            let value = |i: usize| match self.cells[i][idx] {
                CellValue::Number(v) => v,
                CellValue::Category(_) => unreachable!("checked numeric"),
            };
            return Ok(ResolvedTerm {
                columns: vec![(
                    name.to_string(),
                    train.iter().map(|&i| value(i)).collect(),
                    pred.iter().map(|&i| value(i)).collect(),
                )],
            });
        }
        // Categorical: levels are fixed by the training rows, the first one
        // (sorted) is the reference.
        let levels: BTreeSet<String> =
            train.iter().map(|&i| self.cells[i][idx].level()).collect();
        for &i in pred {
            let level = self.cells[i][idx].level();
            if !levels.contains(&level) {
                return Err(DataError::UnseenLevel { column: name.to_string(), level });
            }
        }
        let columns = levels
            .iter()
            .skip(1)
            .map(|level| {
                let indicator = |i: usize| {
                    if self.cells[i][idx].level() == *level {
                        1.0
                    } else {
                        0.0
                    }
                };
                (
                    format!("{name}={level}"),
                    train.iter().map(|&i| indicator(i)).collect(),
                    pred.iter().map(|&i| indicator(i)).collect(),
                )
            })
            .collect();
        Ok(ResolvedTerm { columns })
    }
}

fn build_fixed_columns(
    view: &TableView,
    fixed: &FixedEffectSpec,
    train: &[usize],
    pred: &[usize],
) -> DataResult<Vec<(String, Vec<f64>, Vec<f64>)>> {
    let mut columns: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    if fixed.intercept {
        columns.push((
            "intercept".to_string(),
            vec![1.0; train.len()],
            vec![1.0; pred.len()],
        ));
    }
    for name in &fixed.main {
        columns.extend(view.resolve_term(name, train, pred)?.columns);
    }
    for (a, b) in &fixed.interactions {
        let left = view.resolve_term(a, train, pred)?;
        let right = view.resolve_term(b, train, pred)?;
        for (na, ta, pa) in &left.columns {
            for (nb, tb, pb) in &right.columns {
                columns.push((
                    format!("{na}*{nb}"),
                    ta.iter().zip(tb).map(|(u, v)| u * v).collect(),
                    pa.iter().zip(pb).map(|(u, v)| u * v).collect(),
                ));
            }
        }
    }
    if columns.is_empty() {
        return Err(DataError::InvalidSpec(
            "the fixed-effect structure has no columns".into(),
        ));
    }
    Ok(columns)
}

fn to_matrix<T: Scalar>(rows: usize, columns: &[(String, Vec<f64>, Vec<f64>)], pred: bool) -> DMatrix<T> {
    DMatrix::from_fn(rows, columns.len(), |i, j| {
        let source = if pred { &columns[j].2 } else { &columns[j].1 };
        T::from_f64_c(source[i])
    })
}

fn gather_responses<T: Scalar>(
    view: &TableView,
    train: &[usize],
    pred: &[usize],
) -> DataResult<(DVector<T>, Option<DVector<T>>)> {
    let mut y = DVector::<T>::zeros(train.len());
    for (k, &i) in train.iter().enumerate() {
        match view.responses[i] {
            Some(v) => y[k] = T::from_f64_c(v),
            None => {
                let (id, time) = match &view.ids {
                    Some(ids) => (ids[i].to_string(), view.builtins["time"][i]),
                    None => (format!("row {}", i + 1), f64::NAN),
                };
                return Err(DataError::MissingResponse { id, time });
            }
        }
    }
    let y_star = if pred.iter().all(|&i| view.responses[i].is_some()) {
        Some(DVector::from_fn(pred.len(), |k, _| {
            T::from_f64_c(view.responses[pred[k]].expect("checked present"))
        }))
    } else {
        None
    };
    Ok((y, y_star))
}

struct SubjectLayout {
    subjects: Vec<String>,
    per_subject_dim: usize,
}

fn build_subject_z<T: Scalar>(
    view: &TableView,
    intercept: bool,
    slopes: &[String],
    train: &[usize],
    pred: &[usize],
) -> DataResult<(DMatrix<T>, DMatrix<T>, SubjectLayout)> {
    let ids = view.ids.as_ref().ok_or_else(|| {
        DataError::InvalidSpec("subject random effects need a table with subject ids".into())
    })?;
    let per_subject_dim = usize::from(intercept) + slopes.len();
    if per_subject_dim == 0 {
        return Err(DataError::InvalidSpec(
            "subject random effects need an intercept or at least one slope".into(),
        ));
    }
    let subjects: Vec<String> = {
        let set: BTreeSet<&str> = train.iter().map(|&i| ids[i]).collect();
        set.into_iter().map(str::to_string).collect()
    };
    for &i in pred {
        if !subjects.iter().any(|s| s == ids[i]) {
            return Err(DataError::UnseenSubject { id: ids[i].to_string() });
        }
    }
    // Slope terms must resolve to single numeric columns.
    let mut slope_columns = Vec::new();
    for name in slopes {
        let term = view.resolve_term(name, train, pred)?;
        if term.columns.len() != 1 {
            return Err(DataError::InvalidSpec(format!(
                "random slope term '{name}' is categorical; slopes must be numeric"
            )));
        }
        slope_columns.push(term.columns.into_iter().next().expect("one column"));
    }
    let subject_of = |i: usize| subjects.iter().position(|s| s == ids[i]).expect("validated");
    let fill = |rows: &[usize], pred_side: bool| {
        let mut z = DMatrix::<T>::zeros(rows.len(), subjects.len() * per_subject_dim);
        for (k, &i) in rows.iter().enumerate() {
            let base = subject_of(i) * per_subject_dim;
            let mut col = base;
            if intercept {
                z[(k, col)] = T::one();
                col += 1;
            }
            for (_, train_vals, pred_vals) in &slope_columns {
                let v = if pred_side { pred_vals[k] } else { train_vals[k] };
                z[(k, col)] = T::from_f64_c(v);
                col += 1;
            }
        }
        z
    };
    let z = fill(train, false);
    let z_star = fill(pred, true);
    Ok((z, z_star, SubjectLayout { subjects, per_subject_dim }))
}

fn build_coordinate_z<T: Scalar>(
    view: &TableView,
    standardize: bool,
    train: &[usize],
    pred: &[usize],
) -> DataResult<(DMatrix<T>, DMatrix<T>)> {
    let (xs, ys) = match (view.builtins.get("x"), view.builtins.get("y")) {
        (Some(xs), Some(ys)) => (xs, ys),
        _ => {
            return Err(DataError::InvalidSpec(
                "coordinate random effects need a spatial table".into(),
            ))
        }
    };
    let mut transform: Vec<(f64, f64)> = vec![(0.0, 1.0); 2];
    if standardize {
        for (dim, values) in [xs, ys].into_iter().enumerate() {
            let mean = train.iter().map(|&i| values[i]).sum::<f64>() / train.len() as f64;
            let var = train.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>()
                / (train.len() as f64 - 1.0).max(1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(DataError::InvalidSpec(
                    "cannot standardize coordinates with zero spread".into(),
                ));
            }
            transform[dim] = (mean, sd);
        }
    }
    let fill = |rows: &[usize]| {
        DMatrix::<T>::from_fn(rows.len(), 2, |k, dim| {
            let values = if dim == 0 { xs } else { ys };
            let (mean, sd) = transform[dim];
            T::from_f64_c((values[rows[k]] - mean) / sd)
        })
    };
    Ok((fill(train), fill(pred)))
}

fn assemble_design<T: Scalar>(
    view: &TableView,
    fixed: &FixedEffectSpec,
    random: &RandomEffectSpec,
    train: Vec<usize>,
    pred: Vec<usize>,
    response_label: &str,
) -> DataResult<BuiltDesign<T>> {
    let columns = build_fixed_columns(view, fixed, &train, &pred)?;
    let x = to_matrix::<T>(train.len(), &columns, false);
    let x_star = to_matrix::<T>(pred.len(), &columns, true);
    let (y, y_star) = gather_responses::<T>(view, &train, &pred)?;
    let (z, z_star, n_subjects, per_subject_dim) = match random {
        RandomEffectSpec::Subjects { intercept, slopes } => {
            let (z, z_star, layout) =
                build_subject_z::<T>(view, *intercept, slopes, &train, &pred)?;
            (z, z_star, layout.subjects.len(), layout.per_subject_dim)
        }
        RandomEffectSpec::Coordinates { standardize } => {
            let (z, z_star) = build_coordinate_z::<T>(view, *standardize, &train, &pred)?;
            (z, z_star, 0, 0)
        }
    };
    let data = DesignData::new(y, x, z, x_star, z_star, y_star)?;
    Ok(BuiltDesign {
        data,
        fixed_names: columns.into_iter().map(|(name, _, _)| name).collect(),
        n_subjects,
        per_subject_dim,
        response_label: response_label.to_string(),
        train_rows: train,
        pred_rows: pred,
    })
}

/// Builds a design pair from a long table and a split.
pub fn build_design<T: Scalar>(
    table: &LongTable,
    fixed: &FixedEffectSpec,
    random: &RandomEffectSpec,
    split: &SplitSpec,
) -> DataResult<BuiltDesign<T>> {
    let view = TableView::from_long(table);
    let times: Vec<f64> = table.rows.iter().map(|r| r.time).collect();
    let (train, pred) = split_rows(table.rows.len(), Some(&times), split)?;
    assemble_design(&view, fixed, random, train, pred, &table.response_label)
}

/// Builds a design pair from separate training and prediction tables
/// (already-split data shipped as two files).
pub fn build_design_from_tables<T: Scalar>(
    training: &LongTable,
    prediction: &LongTable,
    fixed: &FixedEffectSpec,
    random: &RandomEffectSpec,
) -> DataResult<BuiltDesign<T>> {
    if training.covariate_names != prediction.covariate_names {
        return Err(DataError::SchemaMismatch(format!(
            "covariates {:?} vs {:?}",
            training.covariate_names, prediction.covariate_names
        )));
    }
    if training.rows.is_empty() {
        return Err(DataError::EmptyPartition { which: "training" });
    }
    if prediction.rows.is_empty() {
        return Err(DataError::EmptyPartition { which: "prediction" });
    }
    let mut merged = training.clone();
    merged.rows.extend(prediction.rows.iter().cloned());
    let view = TableView::from_long(&merged);
    let train: Vec<usize> = (0..training.rows.len()).collect();
    let pred: Vec<usize> = (training.rows.len()..merged.rows.len()).collect();
    assemble_design(&view, fixed, random, train, pred, &training.response_label)
}

/// Builds a design pair from a spatial table and a split. The random-effect
/// design is the (optionally standardized) coordinates, ready to feed a
/// kernel.
pub fn build_spatial_design<T: Scalar>(
    table: &SpatialTable,
    fixed: &FixedEffectSpec,
    standardize: bool,
    split: &SplitSpec,
) -> DataResult<BuiltDesign<T>> {
    let view = TableView::from_spatial(table);
    let (train, pred) = split_rows(table.rows.len(), None, split)?;
    assemble_design(
        &view,
        fixed,
        &RandomEffectSpec::Coordinates { standardize },
        train,
        pred,
        &table.response_label,
    )
}
