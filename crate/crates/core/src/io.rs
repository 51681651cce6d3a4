//! CSV tables and the binary lead-field format.
//!
//! CSV files use a header row, `,` separators and `.` decimals. Floats are
//! written in Rust's shortest round-trip form, so re-exporting the same data
//! is byte-identical.
//!
//! A lead field is stored as `<stem>.json` (`{"rows": R, "cols": C}`) next to
//! `<stem>.bin`, the row-major little-endian `f64` payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_table<P, I, R>(path: P, header: &[String], rows: I) -> Result<()>
where
    P: AsRef<Path>,
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per vector with columns `<prefix>_0, <prefix>_1, …`.
pub fn write_vectors(path: impl AsRef<Path>, prefix: &str, rows: &[DVector<f64>]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.len());
    let header: Vec<String> = (0..width).map(|i| format!("{prefix}_{i}")).collect();
    write_table(path, &header, rows.iter().map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()))
}

/// Reads a numeric CSV with a header row.
pub fn read_vectors(path: impl AsRef<Path>) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::invalid(format!("bad number in CSV: {e}")))?;
        out.push(DVector::from_vec(row));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
}

pub fn write_matrix_bin(dir: impl AsRef<Path>, stem: &str, m: &DMatrix<f64>) -> Result<()> {
    let dir = dir.as_ref();
    let header = MatrixHeader {
        rows: m.nrows(),
        cols: m.ncols(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string(&header)?)?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_bin(dir: impl AsRef<Path>, stem: &str) -> Result<DMatrix<f64>> {
    let dir = dir.as_ref();
    let header: MatrixHeader =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let mut bytes = Vec::new();
    File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;
    if bytes.len() != header.rows * header.cols * 8 {
        return Err(Error::invalid(format!(
            "{stem}.bin holds {} bytes, header expects {}×{} f64",
            bytes.len(),
            header.rows,
            header.cols
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(header.rows, header.cols, &values))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.25, 1e-300, f64::MAX, 0.0]);
        write_matrix_bin(dir.path(), "H", &m).unwrap();
        let bytes = std::fs::read(dir.path().join("H.bin")).unwrap();
        assert_eq!(&bytes[8..16], &(-2.5f64).to_le_bytes());
        assert_eq!(read_matrix_bin(dir.path(), "H").unwrap(), m);
    }

    #[test]
    fn csv_vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let rows = vec![DVector::from_vec(vec![0.1, -90.0]), DVector::from_vec(vec![1e-17, 20.0])];
        write_vectors(&path, "node", &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("node_0,node_1\n0.1,-90\n"));
        assert_eq!(read_vectors(&path).unwrap(), rows);
    }
}
