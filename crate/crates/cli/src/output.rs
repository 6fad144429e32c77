//! Result rows, deterministic CSV emission, and metadata sidecars.
//!
//! Rows are sorted by (alignment, epsilon, batch size, loss, seed, metric)
//! before writing so parallel execution and reruns produce byte-identical
//! bodies. Every CSV gets a `<name>.meta.json` sidecar carrying the fully
//! resolved config and seed list.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

/// One metric observation from one run cell.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub loss_id: String,
    pub alignment_percent: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub metric: String,
    pub value: f64,
    /// "ok", or "nan" when the metric came back non-finite and the row is
    /// kept only as a flag.
    pub status: String,
}

impl ResultRow {
    pub fn flag_status(value: f64) -> String {
        if value.is_finite() { "ok" } else { "nan" }.to_string()
    }

    fn sort_key(&self) -> (u64, u64, usize, &str, u64, &str) {
        (
            self.alignment_percent.to_bits(),
            self.epsilon.to_bits(),
            self.batch_size,
            &self.loss_id,
            self.seed,
            &self.metric,
        )
    }
}

/// Per-alignment aggregate over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub loss_id: String,
    pub alignment_percent: f64,
    pub metric: String,
    pub value: f64,
    pub n_seeds: usize,
}

/// Sorts rows into the canonical order and writes them with a header.
pub fn write_rows(path: &Path, rows: &mut [ResultRow]) -> Result<(), CliError> {
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    for row in rows.iter() {
        writer.serialize(row)?;
    }
    writer.flush().map_err(CliError::Io)?;
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(CliError::Io)?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
}

/// Writes `<csv_path>.meta.json` next to a CSV.
pub fn write_sidecar(
    csv_path: &Path,
    command: &str,
    config: &ExperimentConfig,
) -> Result<(), CliError> {
    let meta = Sidecar {
        command,
        seeds: &config.seeds,
        config,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    let mut path: PathBuf = csv_path.to_path_buf();
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    path.set_file_name(name);
    std::fs::write(&path, text).map_err(CliError::Io)?;
    Ok(())
}

/// Serializes a report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, report: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::Io)?;
    Ok(())
}
