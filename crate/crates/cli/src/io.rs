//! CSV input and output.
//!
//! Input: optional header (detected when the first row has a non-numeric
//! field), one point per row, dimension from the column count. A column
//! headed `label` or `diagnosis` is kept aside and never fitted.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use crate::CliError;

const LABEL_COLUMNS: [&str; 2] = ["label", "diagnosis"];

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

pub fn read_points(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_points(file, &path.display().to_string())
}

pub fn parse_points<R: io::Read>(source: R, name: &str) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut label_col: Option<usize> = None;
    let mut width: Option<usize> = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if k == 0 && record.iter().any(|f| f.parse::<f64>().is_err()) {
            label_col = record.iter().position(|f| LABEL_COLUMNS.contains(&f.to_ascii_lowercase().as_str()));
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(CliError::Io(format!(
                "{name}: line {line}: expected {expected} fields, found {}",
                record.len()
            )));
        }
        let mut point = Vec::with_capacity(expected);
        for (c, field) in record.iter().enumerate() {
            if Some(c) == label_col {
                labels.push(field.to_string());
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => point.push(v),
                _ => return Err(CliError::Io(format!("{name}: line {line}: cannot read `{field}` as a number"))),
            }
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(CliError::Invalid(format!("{name}: no data rows")));
    }
    Ok(Table {
        points,
        labels: label_col.map(|_| labels),
    })
}

/// CSV writer to a file, or to stdout when `path` is `None`.
pub fn writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(io::BufWriter::new(
            File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::WriterBuilder::new().from_writer(sink))
}

pub fn write_row<W: Write, I: IntoIterator<Item = String>>(w: &mut csv::Writer<W>, row: I) -> Result<(), CliError> {
    w.write_record(row.into_iter().collect::<Vec<_>>())
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}
