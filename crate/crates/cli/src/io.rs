//! File access. Outputs go to a temporary file in the target directory and
//! are renamed into place, so readers never see a partial file.

use std::io::Write;
use std::path::{Path, PathBuf};

use mandelq::format::{read_any, TimestampFile, BINARY_MAGIC};
use mandelq::report::Table;

use crate::CliError;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::data(path, e);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_table(path: &Path, table: &Table) -> Result<(), CliError> {
    write_atomic(path, &table.to_bytes())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::data(path, e))
}

pub fn is_binary(bytes: &[u8]) -> bool {
    bytes.starts_with(BINARY_MAGIC)
}

/// A timestamp file and whether it was binary.
pub fn read_timestamps(path: &Path) -> Result<(TimestampFile, bool), CliError> {
    let bytes = read_bytes(path)?;
    let file = read_any(&bytes).map_err(|e| CliError::data(path, e))?;
    Ok((file, is_binary(&bytes)))
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let bytes = read_bytes(path)?;
    Table::read(&bytes[..]).map_err(|e| CliError::data(path, e))
}

/// Named numeric columns of a CSV, with or without a table banner. Lines
/// starting with `#` are comments; the first other line names the columns.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::data(path, e))?;
    let mut header: Option<Vec<String>> = None;
    let mut idx = Vec::new();
    let mut cols = vec![Vec::new(); names.len()];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |msg: String| CliError::data(path, format!("line {}: {msg}", i + 1));
        match &header {
            None => {
                let h: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
                for n in names {
                    let j = h
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| err(format!("missing column '{n}'")))?;
                    idx.push(j);
                }
                header = Some(h);
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(err(format!("expected {} fields, found {}", h.len(), fields.len())));
                }
                for (c, &j) in cols.iter_mut().zip(&idx) {
                    let v = fields[j]
                        .parse::<f64>()
                        .map_err(|_| err(format!("invalid number '{}'", fields[j])))?;
                    c.push(v);
                }
            }
        }
    }
    if header.is_none() {
        return Err(CliError::data(path, "no column header"));
    }
    Ok(cols)
}

/// `x.json` -> `x.curve.csv`.
pub fn default_curve_path(output: &Path) -> PathBuf {
    output.with_extension("curve.csv")
}
