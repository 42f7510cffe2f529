//! File formats: headered CSV matrices (lossless float round-trip) and the
//! JSON artifact schemas.

use std::fs;
use std::path::Path;

use envmix::icc::FitResult;
use envmix::model::{Dataset, LabelVector, MixtureParams};
use envmix::selection::SelectionReport;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

/// Floats are written with 17 significant digits so parsing them back gives
/// the identical f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, prefix: &str) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))?;
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    w.write_record(&header).map_err(CliError::from_csv)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        w.write_record(&row).map_err(CliError::from_csv)?;
    }
    w.flush()
        .map_err(|e| CliError::data(format!("cannot flush {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let ncols = reader
        .headers()
        .map_err(CliError::from_csv)?
        .len();
    let mut values: Vec<f64> = Vec::new();
    let mut nrows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(CliError::from_csv)?;
        if record.len() != ncols {
            return Err(CliError::data(format!(
                "{}: row {} has {} fields, header has {ncols}",
                path.display(),
                i + 2,
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::data(format!(
                    "{}: row {} column {} is not a number: {field:?}",
                    path.display(),
                    i + 2,
                    j + 1
                ))
            })?;
            values.push(v);
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(CliError::data(format!("{}: no data rows", path.display())));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, values))
}

pub fn write_labels_csv(path: &Path, labels: &LabelVector) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))?;
    w.write_record(["label"]).map_err(CliError::from_csv)?;
    for l in labels.iter() {
        w.write_record([l.to_string()]).map_err(CliError::from_csv)?;
    }
    w.flush()
        .map_err(|e| CliError::data(format!("cannot flush {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_labels_csv(path: &Path, m: usize) -> CliResult<LabelVector> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(CliError::from_csv)?;
        let raw = record.get(0).unwrap_or("");
        let l: usize = raw.trim().parse().map_err(|_| {
            CliError::data(format!(
                "{}: row {} is not a label: {raw:?}",
                path.display(),
                i + 2
            ))
        })?;
        labels.push(l);
    }
    LabelVector::new(labels, m)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(
    x_path: &Path,
    y_path: &Path,
    labels: Option<(&Path, usize)>,
) -> CliResult<Dataset> {
    let x = read_matrix_csv(x_path)?;
    let y = read_matrix_csv(y_path)?;
    let labels = match labels {
        Some((path, m)) => Some(read_labels_csv(path, m)?),
        None => None,
    };
    Dataset::new(x, y, labels).map_err(CliError::from_core)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Full parameter collection in a stable nested-array layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct ThetaJson {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub eta: Vec<Vec<Vec<f64>>>,
    pub omega: Vec<Vec<Vec<f64>>>,
    pub omega0: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub gamma0: Vec<Vec<f64>>,
    pub beta: Vec<Vec<Vec<f64>>>,
}

impl ThetaJson {
    pub fn from_params(theta: &MixtureParams) -> Self {
        Self {
            pi: theta.pi.clone(),
            mu: theta
                .groups
                .iter()
                .map(|g| g.mu.iter().cloned().collect())
                .collect(),
            eta: theta.groups.iter().map(|g| matrix_rows(&g.eta)).collect(),
            omega: theta.groups.iter().map(|g| matrix_rows(&g.omega)).collect(),
            omega0: matrix_rows(&theta.omega0),
            gamma: matrix_rows(theta.basis.gamma()),
            gamma0: matrix_rows(theta.basis.gamma0()),
            beta: (0..theta.m()).map(|k| matrix_rows(&theta.beta(k))).collect(),
        }
    }

}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitJson {
    pub manifest: RunManifest,
    pub method: String,
    pub m: usize,
    pub u: usize,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seed_used: u64,
    pub theta: ThetaJson,
    pub labels: Vec<usize>,
    pub responsibilities: Vec<Vec<f64>>,
    pub loglik_trace: Vec<f64>,
}

impl FitJson {
    pub fn new(manifest: RunManifest, method: &str, m: usize, u: usize, fit: &FitResult) -> Self {
        // Only span(Gamma) is identified; write the canonical representative
        // so outputs are comparable across runs.
        let mut theta = fit.theta.clone();
        theta.canonicalize();
        Self {
            manifest,
            method: method.to_string(),
            m,
            u,
            loglik: fit.loglik(),
            converged: fit.converged,
            iterations: fit.iterations,
            seed_used: fit.seed_used,
            theta: ThetaJson::from_params(&theta),
            labels: fit.labels.as_slice().to_vec(),
            responsibilities: matrix_rows(&fit.responsibilities),
            loglik_trace: fit.loglik_trace.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionCellJson {
    pub m: usize,
    pub u: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionJson {
    pub manifest: RunManifest,
    pub n: usize,
    pub grid: Vec<SelectionCellJson>,
    pub best: Option<(usize, usize)>,
}

impl SelectionJson {
    pub fn new(manifest: RunManifest, report: &SelectionReport) -> Self {
        Self {
            manifest,
            n: report.n,
            grid: report
                .grid
                .iter()
                .map(|c| SelectionCellJson {
                    m: c.m,
                    u: c.u,
                    loglik: c.loglik.is_finite().then_some(c.loglik),
                    bic: c.bic.is_finite().then_some(c.bic),
                    converged: c.converged,
                    error: c.error.clone(),
                })
                .collect(),
            best: report.best,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("serialization failed: {e}")))?;
    fs::write(path, body + "\n")
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
