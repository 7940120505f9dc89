// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact formats: CSV, JSON and a binary matrix archive.
//!
//! Matrix archive layout: an 8-byte little-endian header length, a UTF-8
//! JSON header `{format, meta, matrices: [{name, dtype, rows, cols, offset}]}`
//! and a little-endian payload. Matrices are stored row-major; `offset` is in
//! bytes from the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MATRIX_FORMAT: &str = "neuraxis-matrices-v1";

/// 17 significant digits, so every value reads back exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse().map_err(|_| CliError::format(path, format!("not a number: '{s}'")))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.to_path_buf(), source: e })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::format(path, e);
    w.write_record(header).map_err(fail)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(CliError::format(path, "row width differs from header"));
        }
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::format(path, e))?;
    write_bytes(path, &bytes)
}

/// Rows of a CSV whose header must equal `header`.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let got: Vec<String> = r.headers().map_err(|e| CliError::format(path, e))?.iter().map(String::from).collect();
    if got != header {
        return Err(CliError::format(path, format!("header {got:?}, expected {header:?}")));
    }
    r.records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(|e| CliError::format(path, e)))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    matrices: Vec<Entry>,
}

/// Named matrices plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixArchive {
    pub meta: serde_json::Value,
    pub matrices: Vec<(String, Dtype, DMatrix<f64>)>,
}

impl MatrixArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        MatrixArchive { meta, matrices: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, m: DMatrix<f64>) {
        self.matrices.push((name.into(), dtype, m));
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.matrices.iter().find(|(n, _, _)| n == name).map(|(_, _, m)| m)
    }

    pub fn take(&mut self, path: &Path, name: &str) -> Result<DMatrix<f64>> {
        let i = self
            .matrices
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| CliError::format(path, format!("no matrix named '{name}'")))?;
        Ok(self.matrices.remove(i).2)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, dtype, m) in &self.matrices {
            entries.push(Entry { name: name.clone(), dtype: *dtype, rows: m.nrows(), cols: m.ncols(), offset: payload.len() });
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    match dtype {
                        Dtype::F32 => payload.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes()),
                        Dtype::F64 => payload.extend_from_slice(&m[(i, j)].to_le_bytes()),
                    }
                }
            }
        }
        let header = Header { format: MATRIX_FORMAT.into(), meta: self.meta.clone(), matrices: entries };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + h.len() + payload.len());
        out.write_all(&(h.len() as u64).to_le_bytes()).unwrap();
        out.extend_from_slice(&h);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CliError::format(path, m);
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| CliError::format(path, e))?;
        if header.format != MATRIX_FORMAT {
            return Err(bad("unknown archive format"));
        }
        let payload = &body[hlen..];
        let mut matrices = Vec::new();
        for e in header.matrices {
            let w = e.dtype.width();
            let n = e.rows * e.cols;
            let chunk = payload.get(e.offset..e.offset + n * w).ok_or_else(|| bad("matrix outside payload"))?;
            let vals: Vec<f64> = match e.dtype {
                Dtype::F32 => chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Dtype::F64 => chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            matrices.push((e.name, e.dtype, DMatrix::from_row_slice(e.rows, e.cols, &vals)));
        }
        Ok(MatrixArchive { meta: header.meta, matrices })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_bytes(path)?)
    }
}
