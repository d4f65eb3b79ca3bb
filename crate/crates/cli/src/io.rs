//! On-disk formats.
//!
//! CSV files are comma separated with a header row and `.` decimals; floats
//! use Rust's shortest round-trip formatting, so reading a file back gives
//! the exact values written. `u` draws go to a binary matrix:
//!
//! | offset | size      | content                                   |
//! |--------|-----------|-------------------------------------------|
//! | 0      | 8         | magic `HBRTOUM1`                          |
//! | 8      | 8         | rows, `u64` little endian                 |
//! | 16     | 8         | columns, `u64` little endian              |
//! | 24     | 8 r c     | entries, `f64` little endian, row-major   |

use std::fs;
use std::path::Path;

use hibrto::samplers::ChainRecord;
use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const U_MATRIX_MAGIC: &[u8; 8] = b"HBRTOUM1";
const HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct UMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl UMatrix {
    pub fn from_rows(rows: &[DVector<f64>]) -> CliResult<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CliError::Format("u draws have different lengths".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(U_MATRIX_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != U_MATRIX_MAGIC {
            return Err("not a u-matrix file (bad magic)".into());
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let (rows, cols) = (word(8) as usize, word(16) as usize);
        let expected = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or("u-matrix dimensions overflow")?;
        if bytes.len() != expected {
            return Err(format!("{rows} x {cols} u-matrix needs {expected} bytes, file has {}", bytes.len()));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|m| CliError::parse(path, 0, m))
    }
}

/// A numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Format(e.to_string());
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(f64::to_string)).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| CliError::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_csv()?).map_err(|e| CliError::io(path, e))
    }

    /// Parses a CSV with a header row; errors carry the 1-based line number.
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line() as usize);
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::parse(path, line_of(&e), e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if columns.is_empty() || columns.iter().all(String::is_empty) {
            return Err(CliError::parse(path, 1, "missing header row"));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CliError::parse(path, line_of(&e), e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let row = record
                .iter()
                .enumerate()
                .map(|(j, field)| {
                    field.trim().parse::<f64>().map_err(|_| {
                        CliError::parse(path, line, format!("column {:?}: {field:?} is not a number", columns[j]))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

/// `step, lambda, delta, gamma, accept_<block>..., log_lk, u_mid`.
pub fn chain_table(rec: &ChainRecord) -> Table {
    let mut columns: Vec<String> = ["step", "lambda", "delta", "gamma"].map(String::from).to_vec();
    columns.extend(rec.blocks.iter().map(|b| format!("accept_{b}")));
    columns.extend(["log_lk", "u_mid"].map(String::from));
    let rows = (0..rec.len())
        .map(|k| {
            let t = rec.theta[k];
            let mut row = vec![k as f64, t.lambda, t.delta, t.gamma];
            row.extend(&rec.acceptance[k]);
            row.push(rec.log_marginal[k]);
            row.push(rec.u_mid[k]);
            row
        })
        .collect();
    Table { columns, rows }
}

/// `id,value` table of observations.
pub fn data_table(y: &[f64]) -> Table {
    Table {
        columns: vec!["id".into(), "value".into()],
        rows: y.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect(),
    }
}

/// Observations from an `id,value` file; ids must run `0, 1, 2, ...`.
pub fn read_data(path: &Path) -> CliResult<Vec<f64>> {
    let table = Table::read(path)?;
    if table.columns != ["id", "value"] {
        return Err(CliError::parse(path, 1, format!("expected header id,value, got {}", table.columns.join(","))));
    }
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r[0] != i as f64 {
                Err(CliError::parse(path, i + 2, format!("expected id {i}, got {}", r[0])))
            } else if !r[1].is_finite() {
                Err(CliError::parse(path, i + 2, format!("value {} is not finite", r[1])))
            } else {
                Ok(r[1])
            }
        })
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u_matrix_layout_is_byte_exact() {
        let m = UMatrix::from_rows(&[DVector::from_vec(vec![1.0, -2.5]), DVector::from_vec(vec![0.0, 3.0])]).unwrap();
        let bytes = m.encode();
        assert_eq!(bytes.len(), 24 + 4 * 8);
        assert_eq!(&bytes[..8], b"HBRTOUM1");
        assert_eq!(bytes[8..16], [2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes[16..24], [2, 0, 0, 0, 0, 0, 0, 0]);
        // second entry of the first row
        assert_eq!(bytes[32..40], (-2.5f64).to_le_bytes());
        assert_eq!(bytes[40..48], 0.0f64.to_le_bytes());
        assert_eq!(UMatrix::decode(&bytes).unwrap(), m);
        assert_eq!(m.row(1), &[0.0, 3.0]);
    }

    #[test]
    fn truncated_u_matrix_is_rejected() {
        let m = UMatrix::from_rows(&[DVector::from_vec(vec![1.0; 3])]).unwrap();
        let bytes = m.encode();
        assert!(UMatrix::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(UMatrix::decode(b"HBRTOUM2").is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = Table {
            columns: vec!["a".into(), "b".into()],
            rows: vec![vec![0.1 + 0.2, f64::NAN], vec![1e-300, -7.0]],
        };
        t.write(&path).unwrap();
        let back = Table::read(&path).unwrap();
        assert_eq!(back.columns, t.columns);
        assert_eq!(back.rows[0][0], 0.1 + 0.2);
        assert!(back.rows[0][1].is_nan());
        assert_eq!(back.rows[1], t.rows[1]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "id,value\n0,1.5\n1,abc\n").unwrap();
        match read_data(&path) {
            Err(CliError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&path, "id,value\n0,1.5\n2,3\n").unwrap();
        assert!(matches!(read_data(&path), Err(CliError::Parse { line: 3, .. })));
        fs::write(&path, "id,value\n0,1.5\n1,2,3\n").unwrap();
        assert!(matches!(read_data(&path), Err(CliError::Parse { line: 3, .. })));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
