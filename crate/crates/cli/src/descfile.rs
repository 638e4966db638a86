//! `DFV1` descriptor files: 4 magic bytes, u32 rows, u32 columns, then
//! row-major little-endian float32 values.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"DFV1";
const HEADER_LEN: usize = 12;

pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a descriptor file; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::format(path, "truncated descriptor header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::format(path, "not a DFV1 descriptor file (bad magic)"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CliError::format(path, "descriptor dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(CliError::format(
            path,
            format!(
                "payload has {} bytes, header promises {rows}x{cols} floats ({expected} bytes)",
                payload.len()
            ),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn read(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, encode(m)).map_err(|e| CliError::io(path, e))
}
