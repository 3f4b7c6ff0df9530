//! `LDSN` parameter snapshots.
//!
//! Little-endian layout:
//!
//! ```text
//! "LDSN" | u16 version (1) | u32 config length | config JSON
//! u32 tensor count, then per tensor in table order:
//!   u16 name length | name (UTF-8) | u8 rank | rank × u32 extent | f32 values
//! ```

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{LiDsn, ModelConfig, ModelError, Params};
use crate::numeric::Tensor;

const MAGIC: &[u8; 4] = b"LDSN";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("bad magic: not a model snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("snapshot has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("snapshot configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Encodes a model. Values are stored as 32-bit floats.
pub fn write_snapshot(model: &LiDsn) -> Vec<u8> {
    let cfg = serde_json::to_vec(&model.cfg).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(SnapshotError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a snapshot, checking every tensor against the embedded
/// configuration.
pub fn read_snapshot(bytes: &[u8]) -> Result<LiDsn, SnapshotError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| SnapshotError::BadMagic)? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| SnapshotError::Config(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut values = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| SnapshotError::Config(e.to_string()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or(SnapshotError::Truncated(bytes.len()))?)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        let t = Tensor::new(&shape, data).map_err(ModelError::from)?;
        values.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(SnapshotError::TrailingBytes(bytes.len() - r.pos));
    }
    let params = Params::from_named(&cfg, values)?;
    Ok(LiDsn::from_parts(cfg, params)?)
}

pub fn save_snapshot(model: &LiDsn, path: &Path) -> Result<(), SnapshotError> {
    fs::write(path, write_snapshot(model))?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<LiDsn, SnapshotError> {
    read_snapshot(&fs::read(path)?)
}
