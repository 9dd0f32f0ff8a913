//! Versioned CSV tables. Floats are written as `{:.12e}` so the bytes do not
//! depend on locale or on the shortest-representation algorithm.

use std::fs;
use std::path::Path;

use okdrop_core::minimizer::HistorySample;
use serde::Serialize;

use crate::error::{HarnessError, Result};

pub const SWEEP_CSV_SCHEMA: &str = "okdrop-sweep-v1";
pub const HISTORY_CSV_SCHEMA: &str = "okdrop-history-v1";
pub const TABLE_CSV_SCHEMA: &str = "okdrop-table-v1";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.12e}")
}

/// Builds a CSV document whose first column is the schema tag.
pub struct Table {
    schema: &'static str,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: &'static str, header: &[&str]) -> Self {
        Table {
            schema,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(std::iter::once("schema").chain(self.header.iter().map(String::as_str)))?;
        for row in &self.rows {
            w.write_record(std::iter::once(self.schema).chain(row.iter().map(String::as_str)))?;
        }
        w.into_inner().map_err(|e| HarnessError::io("<csv buffer>", e.into_error()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn history_table(history: &[HistorySample]) -> Table {
    let mut t = Table::new(
        HISTORY_CSV_SCHEMA,
        &["step", "temperature", "energy", "best_energy", "droplets"],
    );
    for h in history {
        t.push(vec![
            h.step.to_string(),
            fmt_f64(h.temperature),
            fmt_f64(h.energy),
            fmt_f64(h.best_energy),
            h.droplets.to_string(),
        ]);
    }
    t
}
