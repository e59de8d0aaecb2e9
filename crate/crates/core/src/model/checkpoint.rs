//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "PFDCKPT\0"
//! version u32      1
//! layers  u32
//! shapes  layers x (rows u64, cols u64)
//! data    every layer's entries as f64, row-major, layer order
//! ```
//!
//! The architecture is stored next to the checkpoint as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Architecture, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"PFDCKPT\0";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.layers.len() * 16 + params.num_weights() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for m in &params.layers {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    }
    for m in &params.layers {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let bytes = &self.buf[self.pos..end];
        self.pos = end;
        Ok(bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        shapes.push((rows, cols));
    }
    let mut layers = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        layers.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelParams { layers })
}

/// `model.ckpt` -> `model.arch.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("arch.json")
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, arch: &Architecture) -> Result<()> {
    params.check_shapes(arch)?;
    fs::write(path, encode_checkpoint(params))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(arch)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Architecture)> {
    let params = decode_checkpoint(&fs::read(path)?)?;
    let arch: Architecture = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    params.check_shapes(&arch)?;
    Ok((params, arch))
}
