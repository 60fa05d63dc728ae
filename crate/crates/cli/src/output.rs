//! Artifact envelopes and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Every JSON artifact carries the experiment that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format_version: u32,
    /// `locality`, `layers`, `simulation`, `curve` or `summary`.
    pub kind: String,
    pub config_hash: String,
    pub experiment: ExperimentConfig,
    pub data: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: &str, experiment: &ExperimentConfig, data: T) -> Self {
        Self {
            format_version: ARTIFACT_FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: experiment.hash(),
            experiment: experiment.clone(),
            data,
        }
    }
}

/// A core type with the experiment echoed alongside its own fields.
#[derive(Debug, Serialize)]
pub struct WithExperiment<'a, T> {
    pub experiment: &'a ExperimentConfig,
    #[serde(flatten)]
    pub body: &'a T,
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Serializes rows with a header line taken from the field names.
pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(CliError::Csv)?;
    for r in rows {
        w.serialize(r).map_err(CliError::Csv)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}
