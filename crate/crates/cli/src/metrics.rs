//! Metrics CSV (schema `mpsl-metrics v1`).

use std::path::Path;

use serde::Serialize;

use mpsl_core::checkpoint::write_atomic;

use crate::CliError;

pub const SCHEMA_LINE: &str = "# mpsl-metrics v1";

/// One CSV row. Fields that do not apply to a command hold a neutral value
/// (`clean`, `0`) so every row is complete.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub command: String,
    pub split: String,
    pub mode: String,
    /// `plastic` for training passes, `merged` or `three-path` for inference.
    pub inference: String,
    /// Perturbation kind, `clean` when unperturbed.
    pub kind: String,
    pub level: f64,
    pub epoch: usize,
    pub seed: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub accuracy_sd: f64,
    /// Per-layer `λ` as `a/b/c` joined by `;`.
    pub lambda: String,
    pub lambda_f: f64,
    pub lambda_p: f64,
    pub wall_seconds: f64,
}

pub fn format_lambda(lambda: &[[f64; 3]]) -> String {
    lambda
        .iter()
        .map(|l| format!("{}/{}/{}", l[0], l[1], l[2]))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn run_id(command: &str, config_hash: u64, seed: u64) -> String {
    format!("{command}-{config_hash:016x}-{seed}")
}

pub fn render(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(SCHEMA_LINE.as_bytes());
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(format!("metrics: {e}")))?;
    }
    if rows.is_empty() {
        // The header comes from the first row; write it explicitly for empty files.
        w.write_record(HEADER).map_err(|e| CliError::io(format!("metrics: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::io(format!("metrics: {e}")))
}

pub const HEADER: [&str; 16] = [
    "run_id",
    "command",
    "split",
    "mode",
    "inference",
    "kind",
    "level",
    "epoch",
    "seed",
    "loss",
    "accuracy",
    "accuracy_sd",
    "lambda",
    "lambda_f",
    "lambda_p",
    "wall_seconds",
];

pub fn write(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let bytes = render(rows)?;
    write_atomic(path, &bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
