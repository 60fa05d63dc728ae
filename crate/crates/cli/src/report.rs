//! Merged summaries of locality and simulation artifacts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nosa_core::locality::{LayerLocality, LocalityReport};
use nosa_core::sim::SimReport;

use crate::config::{read_json, ExperimentConfig};
use crate::output::Envelope;
use crate::CliError;

/// Column order of summary CSV files.
pub const SUMMARY_COLUMNS: [&str; 13] = [
    "config_hash",
    "kind",
    "label",
    "n",
    "batch",
    "memory_bytes",
    "hit_rate",
    "tokens_per_s",
    "attn_ratio",
    "min_gamma",
    "mean_gamma",
    "bound",
    "violations",
];

/// One summary line. Fields that do not apply to a row's kind are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    /// `locality` or `simulation`.
    pub kind: String,
    /// Selector, policy, or `selector/layerN`.
    pub label: String,
    pub n: usize,
    pub batch: Option<usize>,
    pub memory_bytes: Option<u64>,
    pub hit_rate: Option<f64>,
    pub tokens_per_s: Option<f64>,
    pub attn_ratio: Option<f64>,
    pub min_gamma: Option<f64>,
    pub mean_gamma: Option<f64>,
    pub bound: Option<f64>,
    pub violations: Option<usize>,
}

impl SummaryRow {
    fn blank(hash: &str, kind: &str, label: String, n: usize) -> Self {
        Self {
            config_hash: hash.to_string(),
            kind: kind.to_string(),
            label,
            n,
            batch: None,
            memory_bytes: None,
            hit_rate: None,
            tokens_per_s: None,
            attn_ratio: None,
            min_gamma: None,
            mean_gamma: None,
            bound: None,
            violations: None,
        }
    }

    fn key(&self) -> (String, String, String, usize, Option<usize>, Option<u64>) {
        (
            self.config_hash.clone(),
            self.kind.clone(),
            self.label.clone(),
            self.n,
            self.batch,
            self.memory_bytes,
        )
    }
}

/// Payload of a `locality` artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityData {
    pub selector: String,
    pub n: usize,
    pub report: LocalityReport,
}

pub fn locality_rows(hash: &str, data: &LocalityData) -> Vec<SummaryRow> {
    let mut row = SummaryRow::blank(hash, "locality", data.selector.clone(), data.n);
    row.min_gamma = Some(data.report.min_gamma);
    row.mean_gamma = Some(data.report.mean_gamma);
    row.bound = data.report.bound;
    row.violations = data.report.bound.map(|_| data.report.violations.len());
    vec![row]
}

pub fn layer_rows(hash: &str, exp: &ExperimentConfig, layers: &[LayerLocality]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for l in layers {
        let mut nosa = SummaryRow::blank(hash, "locality", format!("nosa/layer{}", l.layer), exp.n);
        nosa.min_gamma = Some(l.nosa_min);
        nosa.mean_gamma = Some(l.nosa_mean);
        nosa.bound = Some(l.bound);
        nosa.violations = Some(l.violations);
        let mut base = SummaryRow::blank(hash, "locality", format!("infllmv2/layer{}", l.layer), exp.n);
        base.min_gamma = Some(l.baseline_min);
        base.mean_gamma = Some(l.baseline_mean);
        rows.push(nosa);
        rows.push(base);
    }
    rows
}

pub fn simulation_rows(hash: &str, reports: &[SimReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .map(|r| {
            let mut row = SummaryRow::blank(hash, "simulation", r.policy.to_string(), r.n);
            row.batch = Some(r.batch);
            row.memory_bytes = Some(r.memory_bytes);
            row.hit_rate = Some(r.hit_rate);
            row.tokens_per_s = Some(r.tokens_per_s);
            row.attn_ratio = Some(r.attn_ratio);
            row
        })
        .collect()
}

#[derive(Deserialize)]
struct Kind {
    kind: String,
}

/// Summary rows of one artifact: a JSON envelope or a summary CSV.
pub fn read_rows(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_slice());
        let header: Vec<String> = reader
            .headers()
            .map_err(CliError::Csv)?
            .iter()
            .map(str::to_string)
            .collect();
        if header != SUMMARY_COLUMNS {
            return Err(CliError::Usage(format!(
                "{}: not a summary CSV (header {})",
                path.display(),
                header.join(",")
            )));
        }
        return reader
            .deserialize()
            .collect::<Result<Vec<SummaryRow>, _>>()
            .map_err(CliError::Csv);
    }
    let kind: Kind = read_json(path)?;
    Ok(match kind.kind.as_str() {
        "locality" => {
            let env: Envelope<LocalityData> = read_json(path)?;
            locality_rows(&env.config_hash, &env.data)
        }
        "layers" => {
            let env: Envelope<Vec<LayerLocality>> = read_json(path)?;
            layer_rows(&env.config_hash, &env.experiment, &env.data)
        }
        "simulation" => {
            let env: Envelope<Vec<SimReport>> = read_json(path)?;
            simulation_rows(&env.config_hash, &env.data)
        }
        "summary" => {
            let env: Envelope<Vec<SummaryRow>> = read_json(path)?;
            env.data
        }
        other => {
            return Err(CliError::Usage(format!(
                "{}: cannot merge artifacts of kind `{other}`",
                path.display()
            )))
        }
    })
}

/// Concatenates rows in input order, keeping the first of any rows that
/// share config hash, kind, label, length, batch and memory.
pub fn merge(inputs: Vec<Vec<SummaryRow>>) -> Vec<SummaryRow> {
    let mut seen = HashSet::new();
    inputs
        .into_iter()
        .flatten()
        .filter(|r| seen.insert(r.key()))
        .collect()
}
