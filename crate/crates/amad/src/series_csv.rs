//! Series CSV files: a header row of channel names, one row per timestamp
//! and an optional `label` column of 0/1.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use amad_core::data::TimeSeries;

use crate::error::{CliError, Result};

pub const LABEL_COLUMN: &str = "label";

/// Parses a series CSV. Empty or `NaN` cells take the previous row's value
/// (zero on the first row).
pub fn read_series<R: Read>(reader: R) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(CliError::Data("missing header row".into()));
    }
    let label_idx = header.iter().position(|h| h == LABEL_COLUMN);
    let channels: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if channels.is_empty() {
        return Err(CliError::Data("no value columns".into()));
    }
    let d = channels.len();
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut previous = vec![0.0; d];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(CliError::Data(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let mut ch = 0;
        for (i, cell) in rec.iter().enumerate() {
            if Some(i) == label_idx {
                labels.push(parse_label(cell).ok_or_else(|| {
                    CliError::Data(format!("line {line}: label {cell:?} is not 0 or 1"))
                })?);
                continue;
            }
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                previous[ch]
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    CliError::Data(format!(
                        "line {line}: non-numeric value {cell:?} in column {:?}",
                        channels[ch]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Data(format!(
                        "line {line}: non-finite value {cell:?}"
                    )));
                }
                v
            };
            previous[ch] = v;
            values.push(v);
            ch += 1;
        }
    }
    if values.is_empty() {
        return Err(CliError::Data("series has no rows".into()));
    }
    let labels = label_idx.map(|_| labels);
    Ok(TimeSeries::new(values, channels, labels)?)
}

fn parse_label(cell: &str) -> Option<u8> {
    match cell {
        "0" | "0.0" => Some(0),
        "1" | "1.0" => Some(1),
        _ => None,
    }
}

pub fn load_series(path: &Path) -> Result<TimeSeries> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_series(f).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes values with shortest round-trip formatting, so reading the file
/// back gives bit-identical numbers.
pub fn write_series<W: Write>(writer: W, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = series.channels.iter().map(String::as_str).collect();
    if series.labels.is_some() {
        header.push(LABEL_COLUMN);
    }
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..series.len() {
        let mut row: Vec<String> = series.row(t).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &series.labels {
            row.push(l[t].to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("write failed: {e}")))?;
    Ok(())
}

pub fn save_series(path: &Path, series: &TimeSeries) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_series(std::io::BufWriter::new(f), series)
}

pub(crate) fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(format!("CSV write failed: {e}"))
}
