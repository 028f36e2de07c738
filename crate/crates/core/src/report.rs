//! JSON reports and CSV tables.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rerandomizer::Assignment;

/// Pretty JSON with a trailing newline. Struct fields keep declaration
/// order and maps are sorted, so equal values give identical bytes.
/// Floats use the shortest text that parses back to the same value.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn write_assignment_csv<W: Write>(out: W, unit_ids: &[String], w: &Assignment) -> Result<()> {
    if unit_ids.len() != w.n() {
        return Err(Error::LengthMismatch { expected: w.n(), got: unit_ids.len() });
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["unit_id", "w"])?;
    for (id, v) in unit_ids.iter().zip(w.w()) {
        wtr.write_record([id.as_str(), if *v == 1 { "1" } else { "0" }])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `unit_id,<value>` rows and returns the values in the order of
/// `unit_ids`.
fn read_keyed_column(path: &Path, unit_ids: &[String], column: &str) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "unit_id" || &header[1] != column {
        return Err(Error::SchemaViolation(format!("{} must have header `unit_id,{column}`", path.display())));
    }
    let mut map = std::collections::HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if map.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(Error::DuplicateUnitId(rec[0].to_string()));
        }
    }
    if map.len() != unit_ids.len() {
        return Err(Error::LengthMismatch { expected: unit_ids.len(), got: map.len() });
    }
    unit_ids
        .iter()
        .map(|id| {
            map.remove(id).ok_or_else(|| Error::SchemaViolation(format!("unit `{id}` missing from {}", path.display())))
        })
        .collect()
}

pub fn read_assignment_csv(path: &Path, unit_ids: &[String]) -> Result<Assignment> {
    let w = read_keyed_column(path, unit_ids, "w")?
        .into_iter()
        .map(|s| match s.as_str() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::Parse(format!("assignment value `{other}` is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Assignment::new(w)
}

pub fn read_outcomes_csv(path: &Path, unit_ids: &[String]) -> Result<Vec<f64>> {
    read_keyed_column(path, unit_ids, "y")?
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let v: f64 = s.parse().map_err(|_| Error::Parse(format!("outcome `{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { row: i, col: 1 })
            }
        })
        .collect()
}

/// One number per non-empty line.
pub fn read_vector_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().map_err(|_| Error::Parse(format!("`{l}` is not a number"))))
        .collect()
}

/// Headerless numeric CSV.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(open(path)?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::Parse(format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(rows)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Row of the simulation results table.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SimulationRecord {
    pub d: usize,
    pub gamma: f64,
    pub scenario: String,
    pub method: String,
    pub sd_ratio: f64,
    pub mc_se: f64,
    pub replications: usize,
    pub seed: u64,
}

pub fn write_simulation_csv<W: Write>(out: W, rows: &[SimulationRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    if rows.is_empty() {
        wtr.write_record(["d", "gamma", "scenario", "method", "sd_ratio", "mc_se", "replications", "seed"])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
