//! Small helpers for the numeric CSV files used across the log formats.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
#[error("{path}:{line}: {msg}")]
pub struct TextError {
    pub path: String,
    pub line: usize,
    pub msg: String,
}

impl TextError {
    pub fn new(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self { path: path.display().to_string(), line, msg: msg.into() }
    }
}

/// Reads a header-checked CSV of numbers. Blank lines and `#` comments are skipped.
pub fn read_numeric_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>, TextError> {
    let file = fs::File::open(path).map_err(|e| TextError::new(path, 0, e.to_string()))?;
    let width = header.split(',').count();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TextError::new(path, i + 1, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != header {
                return Err(TextError::new(path, i + 1, format!("expected header `{header}`, found `{line}`")));
            }
            saw_header = true;
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, s)| {
                s.trim().parse::<f64>().map_err(|e| {
                    let name = header.split(',').nth(col).unwrap_or("?");
                    TextError::new(path, i + 1, format!("field `{name}`: {e}"))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if row.len() != width {
            return Err(TextError::new(path, i + 1, format!("expected {width} fields, got {}", row.len())));
        }
        rows.push(row);
    }
    if !saw_header {
        return Err(TextError::new(path, 0, format!("missing header `{header}`")));
    }
    Ok(rows)
}
