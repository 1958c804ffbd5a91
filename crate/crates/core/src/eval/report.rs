//! CSV and JSON report files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::GridRow;
use crate::error::{KvwError, Result};

pub fn write_rows_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| KvwError::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| KvwError::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<GridRow>> {
    let text = fs::read(path).map_err(|e| KvwError::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    r.deserialize()
        .map(|row| row.map_err(|e| KvwError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| KvwError::io(path, e))
}
