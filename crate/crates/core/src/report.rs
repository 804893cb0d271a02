//! Small helpers for the CSV/JSON report files.
//!
//! CSV files use a fixed column order, LF line endings and Rust's shortest
//! round-trip float formatting, so identical results give identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Accumulates CSV text.
#[derive(Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn with_header(columns: &[&str]) -> Self {
        let mut csv = Csv::default();
        csv.row(columns.iter().map(|c| c.to_string()));
        csv
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let line: Vec<String> = fields.into_iter().map(|f| escape(&f.to_string())).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path, &self.text)
    }
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json(path: impl AsRef<Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
