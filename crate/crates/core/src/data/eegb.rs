//! EEGB v1 epoch files.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "EEGB" | u16 version (1) | u32 n_trials | u16 n_channels | u32 n_samples
//! f32 fs | u16 n_classes | n_trials × u16 label | n_trials × u16 subject
//! f32 data, trial-major [trial][channel][sample]
//! ```

use std::fs;
use std::path::Path;

use super::{DataError, EpochSet};

const MAGIC: &[u8; 4] = b"EEGB";
const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 2 + 4 + 4 + 2;

/// Encodes a set; values are stored as 32-bit floats.
pub fn encode_epochs(set: &EpochSet) -> Result<Vec<u8>, DataError> {
    let n = set.n_trials();
    let too_big = |what: &str| DataError::Inconsistent(format!("{what} does not fit the EEGB field width"));
    let n32 = u32::try_from(n).map_err(|_| too_big("n_trials"))?;
    let c16 = u16::try_from(set.n_channels()).map_err(|_| too_big("n_channels"))?;
    let t32 = u32::try_from(set.n_samples()).map_err(|_| too_big("n_samples"))?;
    let k16 = u16::try_from(set.n_classes()).map_err(|_| too_big("n_classes"))?;
    let mut out = Vec::with_capacity(HEADER + 4 * n + 4 * set.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&c16.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&(set.fs() as f32).to_le_bytes());
    out.extend_from_slice(&k16.to_le_bytes());
    for &l in set.labels() {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for &s in set.subjects() {
        out.extend_from_slice(&u16::try_from(s).map_err(|_| too_big("subject id"))?.to_le_bytes());
    }
    for &v in set.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_epochs(bytes: &[u8]) -> Result<EpochSet, DataError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(DataError::Truncated { expected: HEADER, found: bytes.len() });
    }
    let version = le_u16(bytes, 4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER {
        return Err(DataError::Truncated { expected: HEADER, found: bytes.len() });
    }
    let n = le_u32(bytes, 6) as usize;
    let c = le_u16(bytes, 10) as usize;
    let t = le_u32(bytes, 12) as usize;
    let fs = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let k = le_u16(bytes, 20) as usize;
    for (name, v) in [("n_trials", n), ("n_channels", c), ("n_samples", t), ("n_classes", k)] {
        if v == 0 {
            return Err(DataError::ZeroExtent(name));
        }
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(DataError::InvalidSampleRate(f64::from(fs)));
    }
    let expected = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER + 4 * n))
        .ok_or(DataError::Truncated { expected: usize::MAX, found: bytes.len() })?;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    let labels: Vec<usize> = (0..n).map(|i| le_u16(bytes, HEADER + 2 * i) as usize).collect();
    let subjects: Vec<usize> = (0..n).map(|i| le_u16(bytes, HEADER + 2 * n + 2 * i) as usize).collect();
    let data = bytes[HEADER + 4 * n..]
        .chunks_exact(4)
        .map(|ch| f64::from(f32::from_le_bytes(ch.try_into().unwrap())))
        .collect();
    let mut set = EpochSet::new(data, c, t, labels, subjects, f64::from(fs), k)?;
    set.provenance = "eegb".into();
    Ok(set)
}

pub fn save_epochs(set: &EpochSet, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_epochs(set)?)?;
    Ok(())
}

pub fn load_epochs(path: &Path) -> Result<EpochSet, DataError> {
    decode_epochs(&fs::read(path)?)
}
