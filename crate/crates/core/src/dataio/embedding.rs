//! Binary embedding matrices.
//!
//! Layout (little-endian, packed): `"PTE1"`, `u16` version, `u32` rows,
//! `u32` dim, then `rows · dim` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PTE1";
pub const EMBEDDING_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// Rounds every value through `f32`, as a write followed by a read would.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn encode_embeddings(t: &Tensor) -> Result<Vec<u8>> {
    let rows = u32::try_from(t.rows()).map_err(|_| Error::LengthMismatch("too many rows".into()))?;
    let dim = u32::try_from(t.cols()).map_err(|_| Error::LengthMismatch("too many columns".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (i, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinitePayload(format!(
                "value {v} at row {}, column {} is not representable",
                i / t.cols().max(1),
                i % t.cols().max(1)
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(EMBEDDING_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(Error::BadVersion(version));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::TruncatedFile(format!("header declares {rows}x{dim}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedFile(format!(
            "header declares {rows}x{dim} ({expected} bytes), payload has {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::LengthMismatch(format!(
            "{} trailing bytes after the payload",
            payload.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinitePayload(format!("entry {i} is {v}")));
        }
        data.push(v as f64);
    }
    Tensor::from_vec(rows, dim, data)
}

pub fn write_embeddings(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_embeddings(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_embeddings(&bytes)
}
