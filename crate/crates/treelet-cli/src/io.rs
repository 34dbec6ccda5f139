//! CSV ingestion and atomic artifact writing.
//!
//! Input tables are rectangular numeric CSVs, one observation per row. A
//! final class or response column can be split off on request. All output
//! files are written to a temporary file in the destination directory and
//! renamed into place, so a failed run never leaves a partial artifact.
//! Numbers are printed in the shortest decimal form that parses back to
//! the same value.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use treelets::supervised::{LabeledData, Target};
use treelets::DataMatrix;

use crate::error::{CliError, Result};

/// Kind of the trailing target column, when one is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// Nonnegative integer class ids.
    Class,
    /// Real-valued regression response.
    Response,
}

/// Input parsing options.
#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    /// Skip the first row as a header.
    pub header: bool,
    pub delimiter: u8,
    /// Split the last column off as a target of this kind.
    pub target: Option<TargetKind>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            header: false,
            delimiter: b',',
            target: None,
        }
    }
}

/// A parsed input table: plain matrix, or matrix plus target column.
#[derive(Debug, Clone)]
pub enum ParsedTable {
    Plain(DataMatrix),
    Labeled(LabeledData),
}

fn parse_number(
    token: &str,
    path: &Path,
    line: usize,
    column: usize,
) -> Result<f64> {
    let value: f64 = token.trim().parse().map_err(|_| CliError::Cell {
        path: path.to_path_buf(),
        line,
        column,
        message: format!("not a number: '{}'", token.trim()),
    })?;
    if !value.is_finite() {
        return Err(CliError::Cell {
            path: path.to_path_buf(),
            line,
            column,
            message: format!("non-finite value '{}'", token.trim()),
        });
    }
    Ok(value)
}

fn parse_class(token: &str, path: &Path, line: usize, column: usize) -> Result<usize> {
    token.trim().parse().map_err(|_| CliError::Cell {
        path: path.to_path_buf(),
        line,
        column,
        message: format!("not a class id: '{}'", token.trim()),
    })
}

/// Reads a rectangular numeric table; cell errors carry 1-based line and
/// column positions (the header, when present, counts as line 1).
pub fn read_table(path: &Path, opts: &CsvOptions) -> Result<ParsedTable> {
    let file = fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(opts.delimiter)
        .flexible(true)
        .from_reader(file);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    let mut responses: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (index, record) in reader.records().enumerate() {
        let line = index + 1;
        let record = record.map_err(|e| CliError::Table {
            path: path.to_path_buf(),
            message: format!("malformed CSV at line {line}: {e}"),
        })?;
        if opts.header && index == 0 {
            width = Some(record.len());
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(CliError::Table {
                    path: path.to_path_buf(),
                    message: format!(
                        "ragged row at line {line}: expected {w} fields, got {}",
                        record.len()
                    ),
                });
            }
            Some(_) => {}
        }
        let fields: Vec<&str> = record.iter().collect();
        let (data_fields, target_field) = match opts.target {
            Some(_) if fields.len() < 2 => {
                return Err(CliError::Table {
                    path: path.to_path_buf(),
                    message: format!(
                        "line {line} has {} field(s); a target column needs at least 2",
                        fields.len()
                    ),
                });
            }
            Some(_) => (&fields[..fields.len() - 1], Some(fields[fields.len() - 1])),
            None => (&fields[..], None),
        };
        let mut row = Vec::with_capacity(data_fields.len());
        for (j, token) in data_fields.iter().enumerate() {
            row.push(parse_number(token, path, line, j + 1)?);
        }
        rows.push(row);
        if let Some(token) = target_field {
            let column = fields.len();
            match opts.target.expect("target option present") {
                TargetKind::Class => classes.push(parse_class(token, path, line, column)?),
                TargetKind::Response => {
                    responses.push(parse_number(token, path, line, column)?)
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Table {
            path: path.to_path_buf(),
            message: "empty table".into(),
        });
    }
    let n = rows.len();
    let p = rows[0].len();
    let mut values = Array2::zeros((n, p));
    for (t, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            values[[t, j]] = *v;
        }
    }
    let data = DataMatrix::new(values)?;
    match opts.target {
        None => Ok(ParsedTable::Plain(data)),
        Some(TargetKind::Class) => Ok(ParsedTable::Labeled(LabeledData::new(
            data,
            Target::Classes(classes),
        )?)),
        Some(TargetKind::Response) => Ok(ParsedTable::Labeled(LabeledData::new(
            data,
            Target::Response(responses),
        )?)),
    }
}

/// Reads a plain numeric matrix (no target column).
pub fn read_matrix(path: &Path, opts: &CsvOptions) -> Result<DataMatrix> {
    match read_table(path, opts)? {
        ParsedTable::Plain(data) => Ok(data),
        ParsedTable::Labeled(labeled) => Ok(labeled.data().clone()),
    }
}

/// Shortest decimal form of `v` that parses back to the same bits.
pub fn float_cell(v: f64) -> String {
    format!("{v}")
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir,
        _ => Path::new("."),
    };
    let io_err = |source: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Serializes rows of string cells as CSV and writes them atomically.
pub fn write_rows(path: &Path, header: Option<&[String]>, rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let table_err = |message: String| CliError::Table {
        path: path.to_path_buf(),
        message,
    };
    if let Some(names) = header {
        writer
            .write_record(names)
            .map_err(|e| table_err(e.to_string()))?;
    }
    for row in rows {
        writer
            .write_record(row)
            .map_err(|e| table_err(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| table_err(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes a headerless numeric matrix as CSV.
pub fn write_matrix(path: &Path, values: &Array2<f64>) -> Result<()> {
    let rows: Vec<Vec<String>> = values
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| float_cell(*v)).collect())
        .collect();
    write_rows(path, None, &rows)
}
