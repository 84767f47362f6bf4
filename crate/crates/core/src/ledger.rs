//! Append-only CSV ledger of evaluation results.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub config_hash: String,
    pub mode: String,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

/// Append one row, creating the file (with header) on first use.
pub fn append_row(path: &Path, row: &LedgerRow) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file);
    writer
        .serialize(row)
        .and_then(|_| writer.flush().map_err(csv::Error::from))
        .map_err(|e| Error::data(format!("ledger write failed: {e}")))
}

pub fn read_rows(path: &Path) -> Result<Vec<LedgerRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::data(format!("ledger read: {e}")))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LedgerRow>, _>>()
        .map_err(|e| Error::data(format!("ledger parse: {e}")))
}
