//! Deformation basis files.
//!
//! JSON: `{ "k": K, "n": N, "blocks": [[3*K floats, row-major], ...] }`.
//! Binary (for large bases): 16-byte header — magic `TTPB`, u32 version,
//! u32 N, u32 K, little-endian — followed by `N * 3 * K` little-endian f64
//! values, row-major per block.

use std::path::Path;

use super::{json_array, json_f64, read_json, FormatError};
use crate::jsonio::JsonWriter;
use nalgebra::Matrix3xX;
use ttp_core::deform::DeformationBasis;

const MAGIC: &[u8; 4] = b"TTPB";
const VERSION: u32 = 1;

pub fn to_json(basis: &DeformationBasis) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("k").value_usize(basis.components());
    w.key("n").value_usize(basis.vertex_count());
    w.key("blocks").begin_array();
    for block in basis.blocks() {
        w.begin_array();
        for row in 0..3 {
            for col in 0..basis.components() {
                w.value_f64(block[(row, col)]);
            }
        }
        w.end_array();
    }
    w.end_array();
    w.end_object();
    w.finish()
}

pub fn from_json(path: &Path) -> Result<DeformationBasis, FormatError> {
    let doc = read_json(path)?;
    let k = doc["k"]
        .as_u64()
        .ok_or_else(|| FormatError::invalid(path, "missing \"k\""))? as usize;
    let n = doc["n"]
        .as_u64()
        .ok_or_else(|| FormatError::invalid(path, "missing \"n\""))? as usize;
    let blocks_json = json_array(&doc["blocks"], path, "\"blocks\"")?;
    if blocks_json.len() != n {
        return Err(FormatError::invalid(
            path,
            format!("expected {n} blocks, found {}", blocks_json.len()),
        ));
    }
    let mut blocks = Vec::with_capacity(n);
    for entry in blocks_json {
        let flat = json_array(entry, path, "basis block")?;
        if flat.len() != 3 * k {
            return Err(FormatError::invalid(
                path,
                format!("block needs {} floats, found {}", 3 * k, flat.len()),
            ));
        }
        let mut block = Matrix3xX::zeros(k);
        for (idx, value) in flat.iter().enumerate() {
            block[(idx / k, idx % k)] = json_f64(value, path, "basis entry")?;
        }
        blocks.push(block);
    }
    DeformationBasis::new(blocks).map_err(|e| FormatError::invalid(path, e.to_string()))
}

pub fn to_binary(basis: &DeformationBasis) -> Vec<u8> {
    let (n, k) = (basis.vertex_count(), basis.components());
    let mut out = Vec::with_capacity(16 + n * 3 * k * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for block in basis.blocks() {
        for row in 0..3 {
            for col in 0..k {
                out.extend_from_slice(&block[(row, col)].to_le_bytes());
            }
        }
    }
    out
}

pub fn from_binary(bytes: &[u8], path: &Path) -> Result<DeformationBasis, FormatError> {
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(FormatError::invalid(path, "not a TTPB basis file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(FormatError::invalid(path, format!("unsupported version {}", word(4))));
    }
    let n = word(8) as usize;
    let k = word(12) as usize;
    let expected = 16 + n * 3 * k * 8;
    if bytes.len() != expected {
        return Err(FormatError::invalid(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut blocks = Vec::with_capacity(n);
    let mut at = 16;
    for _ in 0..n {
        let mut block = Matrix3xX::zeros(k);
        for row in 0..3 {
            for col in 0..k {
                block[(row, col)] = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                at += 8;
            }
        }
        blocks.push(block);
    }
    DeformationBasis::new(blocks).map_err(|e| FormatError::invalid(path, e.to_string()))
}

/// Load a basis from either format, keyed on the `TTPB` magic.
pub fn load(path: &Path) -> Result<DeformationBasis, FormatError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        from_binary(&bytes, path)
    } else {
        from_json(path)
    }
}
