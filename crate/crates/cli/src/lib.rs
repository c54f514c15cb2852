//! Library side of the `lanpose` command line: config loading, evaluation
//! reports and the fusion ablation.

pub mod ablation;

use std::fs;
use std::path::Path;

use anyhow::Context;
use lanpose_core::metrics::{read_predictions, recall_table, MetricsReport};
use lanpose_core::scene::{load_records, DatasetRecord};
use serde::de::DeserializeOwned;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Malformed invocation or configuration (exit 2).
    Usage(String),
    /// Typed domain failure (exit 1).
    Domain(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Domain(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.into())
    }
}

/// Reads a JSON config; an absent path yields the defaults. Parse failures are usage errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn records(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    Ok(load_records(path).with_context(|| format!("loading records from {}", path.display()))?)
}

/// Scores a predictions file against a records file.
pub fn evaluate(records_path: &Path, predictions_path: &Path) -> Result<MetricsReport, CliError> {
    let recs = records(records_path)?;
    let file = fs::File::open(predictions_path).with_context(|| format!("opening {}", predictions_path.display()))?;
    let preds = read_predictions(std::io::BufReader::new(file))?;
    Ok(recall_table(&recs, &preds)?)
}
