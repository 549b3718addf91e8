//! `embeddings.f32`: two little-endian `u64` (rows, cols) followed by
//! `rows * cols` little-endian `f32`, row-major.

use std::fs;
use std::path::Path;

use super::tsv::write_atomic;
use crate::error::{Result, SencaError};
use crate::numerics::Tensor;

pub fn encode_matrix(m: &Tensor) -> Vec<u8> {
    let (rows, cols) = m.dims2();
    let mut bytes = Vec::with_capacity(16 + 4 * rows * cols);
    bytes.extend_from_slice(&(rows as u64).to_le_bytes());
    bytes.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_matrix(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(SencaError::parse(path, 1, "truncated header"));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SencaError::parse(path, 1, "header dimensions overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(SencaError::parse(
            path,
            1,
            format!(
                "{rows}x{cols} needs {expected} payload bytes, found {}",
                bytes.len() - 16
            ),
        ));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SencaError::parse(path, 1, "non-finite value in matrix"));
    }
    Tensor::matrix(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| SencaError::io(path, e))?;
    decode_matrix(path, &bytes)
}

/// Precomputed per-spot patch embeddings.
pub fn load_patch_embeddings(path: &Path) -> Result<Tensor> {
    load_matrix(path)
}
