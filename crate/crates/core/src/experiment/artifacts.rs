//! Output files. Every artifact is checked against its schema before any
//! byte reaches disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{ExperimentConfig, ExperimentId};
use crate::error::{Error, Result};
use crate::meta::StopReason;
use crate::revbuf::Ratio;

pub const RESULTS_FILE: &str = "results.json";
/// The one results field allowed to differ between identical runs.
pub const TIMESTAMP_FIELD: &str = "timestamp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// `mnist` or `synthetic`.
    pub source: String,
    /// Set when MNIST was requested implicitly but not found.
    pub fallback: bool,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub valid: usize,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub meta_iter: usize,
    pub elementary_final_loss: f64,
    pub hypergrad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub initial_meta_loss: f64,
    pub final_meta_loss: f64,
    pub stop: StopReason,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub groups: Vec<String>,
    /// `alphas[t][group]`
    pub alphas: Vec<Vec<f64>>,
    pub gammas: Vec<Vec<Ratio>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitScaleRow {
    pub group: String,
    pub learned: f64,
    /// `1/sqrt(fan_in)` for weights, the bias default otherwise.
    pub heuristic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub gamma: Ratio,
    pub steps: usize,
    pub elements: usize,
    /// `log2(d / n)`
    pub theoretical_bits: f64,
    pub measured_bits: f64,
    /// `32 T` over the measured bits per element; absent when nothing was stored.
    pub ratio_vs_32bit: Option<f64>,
    pub reversed_exactly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    pub log_alpha: f64,
    pub alpha: f64,
    /// `None` marks a sentinel row.
    pub final_loss: Option<f64>,
    pub dloss_dalpha: Option<f64>,
    /// `ok`, `overflow` or `non_finite`.
    pub status: String,
}

/// Per-experiment findings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Analysis {
    LrSchedule {
        mean_alpha_last_10pct: f64,
        mean_alpha_middle_50pct: f64,
    },
    InitScales {
        scales: Vec<InitScaleRow>,
    },
    PerParamReg {
        initial_valid_error: f64,
        final_valid_error: f64,
    },
    LearnData {
        blank_valid_loss: f64,
        learned_valid_loss: f64,
    },
    TiedReg {
        /// `[layer][task][task]`, penalty scale (not log).
        initial_tying: Vec<Vec<Vec<f64>>>,
        final_tying: Vec<Vec<Vec<f64>>>,
    },
    ChaosSweep {
        points: usize,
        sentinel_rows: usize,
        initial_loss: f64,
        /// Correlation of `alpha * dL/dalpha` with the finite-difference
        /// slope of the loss in `log alpha`, lowest and highest decade.
        correlation_bottom_decade: Option<f64>,
        correlation_top_decade: Option<f64>,
    },
    MemoryBench {
        rows: Vec<MemoryRow>,
    },
}

impl Analysis {
    pub fn kind(&self) -> ExperimentId {
        match self {
            Analysis::LrSchedule { .. } => ExperimentId::LrSchedule,
            Analysis::InitScales { .. } => ExperimentId::InitScales,
            Analysis::PerParamReg { .. } => ExperimentId::PerParamReg,
            Analysis::LearnData { .. } => ExperimentId::LearnData,
            Analysis::TiedReg { .. } => ExperimentId::TiedReg,
            Analysis::ChaosSweep { .. } => ExperimentId::ChaosSweep,
            Analysis::MemoryBench { .. } => ExperimentId::MemoryBench,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub experiment: ExperimentId,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub config: ExperimentConfig,
    pub dataset: Option<DatasetSummary>,
    pub meta: Option<MetaSummary>,
    pub schedules: Option<ScheduleSummary>,
    /// Final `theta` by block name, in the block's own parameterization.
    pub hypers: BTreeMap<String, Vec<f64>>,
    pub analysis: Analysis,
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Int,
    /// Finite real.
    Num,
    /// Finite real or empty (sentinel rows).
    OptNum,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: &'static str,
    pub columns: Vec<(&'static str, ColumnKind)>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(file: &'static str, columns: Vec<(&'static str, ColumnKind)>) -> Self {
        Self { file, columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Schema { artifact: self.file.to_string(), message });
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return fail(format!("row {i} has {} cells, header has {}", row.len(), self.columns.len()));
            }
            for (cell, (name, kind)) in row.iter().zip(&self.columns) {
                let ok = match (kind, cell) {
                    (ColumnKind::Int, Cell::Int(_)) | (ColumnKind::Text, Cell::Text(_)) => true,
                    (ColumnKind::Num | ColumnKind::OptNum, Cell::Num(x)) => x.is_finite(),
                    (ColumnKind::OptNum, Cell::Empty) => true,
                    _ => false,
                };
                if !ok {
                    return fail(format!("row {i}, column `{name}`: {cell:?} is not a valid {kind:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Schema { artifact: self.file.to_string(), message: e.to_string() };
        w.write_record(self.columns.iter().map(|(n, _)| *n)).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| match c {
                Cell::Int(i) => i.to_string(),
                Cell::Num(x) => format!("{x:?}"),
                Cell::Text(s) => s.clone(),
                Cell::Empty => String::new(),
            }))
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Schema { artifact: self.file.to_string(), message: e.to_string() })
    }
}

/// Structural checks on a results document.
pub fn validate_results(doc: &Value) -> Result<()> {
    let fail = |message: String| Err(Error::Schema { artifact: RESULTS_FILE.to_string(), message });
    let Some(obj) = doc.as_object() else {
        return fail("top level is not an object".into());
    };
    for key in ["experiment", "config_hash", TIMESTAMP_FIELD, "config", "dataset", "meta", "schedules", "hypers", "analysis"] {
        if !obj.contains_key(key) {
            return fail(format!("missing `{key}`"));
        }
    }
    let experiment = obj["experiment"].as_str().unwrap_or_default();
    if experiment.parse::<ExperimentId>().is_err() {
        return fail(format!("`experiment` is not a known id: {}", obj["experiment"]));
    }
    let hash = obj["config_hash"].as_str().unwrap_or_default();
    if hash.len() != 16 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return fail("`config_hash` must be 16 hex digits".into());
    }
    if !obj[TIMESTAMP_FIELD].is_u64() {
        return fail("`timestamp` must be an unsigned integer".into());
    }
    if obj["analysis"]["kind"].as_str() != Some(experiment) {
        return fail("`analysis.kind` does not match `experiment`".into());
    }
    if let Some(meta) = obj["meta"].as_object() {
        for key in ["initial_meta_loss", "final_meta_loss"] {
            if !meta.get(key).is_some_and(Value::is_f64) {
                return fail(format!("`meta.{key}` must be a finite number"));
            }
        }
        let Some(curve) = meta.get("curve").and_then(Value::as_array) else {
            return fail("`meta.curve` must be an array".into());
        };
        for (i, p) in curve.iter().enumerate() {
            if !(p["meta_iter"].as_u64() == Some(i as u64) && p["elementary_final_loss"].is_f64() && p["hypergrad_norm"].is_f64()) {
                return fail(format!("`meta.curve[{i}]` is malformed"));
            }
        }
    }
    if let Some(s) = obj["schedules"].as_object() {
        let groups = s.get("groups").and_then(Value::as_array).map_or(0, Vec::len);
        for key in ["alphas", "gammas"] {
            let rows = s.get(key).and_then(Value::as_array);
            if !rows.is_some_and(|rows| rows.iter().all(|r| r.as_array().is_some_and(|r| r.len() == groups))) {
                return fail(format!("`schedules.{key}` must have one entry per group in every row"));
            }
        }
    }
    if !obj["hypers"].as_object().is_some_and(|h| {
        h.values().all(|v| v.as_array().is_some_and(|xs| xs.iter().all(Value::is_f64)))
    }) {
        return fail("`hypers` must map block names to finite number arrays".into());
    }
    Ok(())
}

/// Serializes and validates everything, then writes. Returns written paths.
pub fn write_all(dir: &Path, results: &Results, tables: &[Table]) -> Result<Vec<PathBuf>> {
    let doc = serde_json::to_value(results).map_err(|e| Error::Schema {
        artifact: RESULTS_FILE.to_string(),
        message: e.to_string(),
    })?;
    validate_results(&doc)?;
    let mut json = serde_json::to_string_pretty(&doc).expect("value serializes");
    json.push('\n');
    let csvs = tables.iter().map(|t| Ok((t.file, t.to_csv()?))).collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put(RESULTS_FILE, json.as_bytes())?;
    for (name, bytes) in &csvs {
        put(name, bytes)?;
    }
    Ok(written)
}

/// `results.json` text with the timestamp line removed, for rerun comparisons.
pub fn without_timestamp(results_json: &str) -> String {
    let needle = format!("\"{TIMESTAMP_FIELD}\":");
    results_json.lines().filter(|l| !l.trim_start().starts_with(&needle)).collect::<Vec<_>>().join("\n")
}
