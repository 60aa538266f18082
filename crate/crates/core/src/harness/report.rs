//! Results CSV and run manifest.
//!
//! Per-seed rows carry `seed = t` (the replication index) and leave the three
//! aggregate columns empty; each (estimator, value) cell ends with one
//! aggregate row with `seed = -1`, the mean estimate, the cell ground truth,
//! and `squared_error = mse`. Floats use Rust's shortest round-trip form, so
//! parsing the file reproduces [`ResultRow`]s bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{data_seed, ExperimentReport, SweepSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

pub const CSV_HEADER: [&str; 10] = [
    "estimator",
    "param",
    "value",
    "seed",
    "estimate",
    "ground_truth",
    "squared_error",
    "mse",
    "squared_bias",
    "variance",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub estimator: String,
    pub param: String,
    pub value: f64,
    /// Replication index, or -1 on aggregate rows.
    pub seed: i64,
    pub estimate: Option<f64>,
    pub ground_truth: f64,
    pub squared_error: Option<f64>,
    pub mse: Option<f64>,
    pub squared_bias: Option<f64>,
    pub variance: Option<f64>,
}

impl ResultRow {
    pub fn is_aggregate(&self) -> bool {
        self.seed < 0
    }

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.estimator.clone(),
            self.param.clone(),
            self.value.to_string(),
            self.seed.to_string(),
            opt(self.estimate),
            self.ground_truth.to_string(),
            opt(self.squared_error),
            opt(self.mse),
            opt(self.squared_bias),
            opt(self.variance),
        ]
    }
}

impl ExperimentReport {
    /// The rows [`emit_report`] writes, in file order.
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            let estimator = cell.estimator.name().to_string();
            let param = cell.param.name().to_string();
            for (t, s) in cell.seeds.iter().enumerate() {
                rows.push(ResultRow {
                    estimator: estimator.clone(),
                    param: param.clone(),
                    value: cell.value,
                    seed: t as i64,
                    estimate: s.estimate,
                    ground_truth: s.ground_truth,
                    squared_error: s.estimate.map(|e| (e - s.ground_truth).powi(2)),
                    mse: None,
                    squared_bias: None,
                    variance: None,
                });
            }
            rows.push(ResultRow {
                estimator,
                param,
                value: cell.value,
                seed: -1,
                estimate: cell.mean_estimate,
                ground_truth: cell.ground_truth,
                squared_error: cell.mse,
                mse: cell.mse,
                squared_bias: cell.squared_bias,
                variance: cell.variance,
            });
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub estimator: String,
    pub value: f64,
    pub ground_truth: f64,
    pub ground_truth_std_error: f64,
    pub failed: usize,
    /// `(replication index, reason)` for every failed seed.
    pub failures: Vec<(usize, String)>,
}

/// Everything needed to rerun and audit a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub fingerprint: String,
    pub spec: SweepSpec,
    /// Data and model stream seeds of each replication index.
    pub data_seeds: Vec<u64>,
    pub model_seeds: Vec<u64>,
    pub cells: Vec<ManifestCell>,
}

impl Manifest {
    pub fn new(report: &ExperimentReport) -> Self {
        let spec = &report.spec;
        Self {
            software: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: report.fingerprint.clone(),
            spec: spec.clone(),
            data_seeds: (0..spec.reps)
                .map(|t| data_seed(spec.base.seed, t))
                .collect(),
            model_seeds: (0..spec.reps)
                .map(|t| derive_seed(spec.base.seed, Stream::Model, t as u64))
                .collect(),
            cells: report
                .cells
                .iter()
                .map(|c| ManifestCell {
                    estimator: c.estimator.name().to_string(),
                    value: c.value,
                    ground_truth: c.ground_truth,
                    ground_truth_std_error: c.ground_truth_std_error,
                    failed: c.failed(),
                    failures: c
                        .seeds
                        .iter()
                        .enumerate()
                        .filter_map(|(t, s)| s.failure.clone().map(|f| (t, f)))
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes the results CSV at `path` and the manifest next to it; returns
/// the manifest path.
pub fn emit_report(report: &ExperimentReport, path: &Path) -> Result<PathBuf> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for row in report.rows() {
        writer
            .write_record(row.fields())
            .map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;

    let mpath = manifest_path(path);
    let text =
        serde_json::to_string_pretty(&Manifest::new(report)).map_err(|e| Error::json(&mpath, e))?;
    let mut f = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Parses a results CSV written by [`emit_report`].
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().eq(CSV_HEADER) => {}
        Some(Err(e)) => return Err(Error::csv(path, e)),
        _ => return Err(Error::malformed(path, "missing or unexpected header")),
    }
    let mut rows = Vec::new();
    for (line, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let bad = |what: &str| Error::malformed(path, format!("row {}: bad {what}", line + 1));
        let num =
            |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i])) };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(ResultRow {
            estimator: rec[0].to_string(),
            param: rec[1].to_string(),
            value: num(2)?,
            seed: rec[3].parse().map_err(|_| bad("seed"))?,
            estimate: opt(4)?,
            ground_truth: num(5)?,
            squared_error: opt(6)?,
            mse: opt(7)?,
            squared_bias: opt(8)?,
            variance: opt(9)?,
        });
    }
    Ok(rows)
}
