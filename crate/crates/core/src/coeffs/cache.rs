//! Binary coefficient cache.
//!
//! Layout (little endian): magic `KVWC`, `u32` version, `u32` layers, `u32` m,
//! `u64` token count, `u8` source, `u8` flags, `u16` reserved, 32-byte dataset
//! hash, then `layers × m` `f32` values.

use std::fs;
use std::path::Path;

use super::{CoefficientMode, KnowledgeCoefficients, Source};
use crate::error::{KvwError, Result};

const MAGIC: &[u8; 4] = b"KVWC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1 + 1 + 2 + 32;

const FLAG_ANS_ONLY: u8 = 1;
const FLAG_CLAMPED: u8 = 2;

pub fn write_coeffs(c: &KnowledgeCoefficients) -> Vec<u8> {
    let m = c.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c.num_layers() * m);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.num_layers() as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&c.token_count.to_le_bytes());
    out.push(match c.source {
        Source::Forget => 0,
        Source::Retain => 1,
    });
    let mut flags = 0;
    if c.ans_only {
        flags |= FLAG_ANS_ONLY;
    }
    if c.mode == CoefficientMode::ClampedMean {
        flags |= FLAG_CLAMPED;
    }
    out.push(flags);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&c.dataset_hash);
    for v in c.per_layer.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn read_coeffs(bytes: &[u8]) -> Result<KnowledgeCoefficients> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(KvwError::CorruptFile("not a coefficient cache".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(KvwError::Version(format!("coefficient cache version {version}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(KvwError::CorruptFile("coefficient cache header truncated".into()));
    }
    let layers = u32_at(bytes, 8) as usize;
    let m = u32_at(bytes, 12) as usize;
    let token_count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let source = match bytes[24] {
        0 => Source::Forget,
        1 => Source::Retain,
        s => return Err(KvwError::CorruptFile(format!("unknown source tag {s}"))),
    };
    let flags = bytes[25];
    let dataset_hash: [u8; 32] = bytes[28..60].try_into().unwrap();
    let want = layers
        .checked_mul(m)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| KvwError::CorruptFile("coefficient cache dimensions overflow".into()))?;
    if bytes.len() != want {
        return Err(KvwError::CorruptFile(format!(
            "coefficient cache is {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let per_layer: Vec<Vec<f32>> = (0..layers).map(|_| values.by_ref().take(m).collect()).collect();
    let c = KnowledgeCoefficients {
        per_layer,
        token_count,
        source,
        ans_only: flags & FLAG_ANS_ONLY != 0,
        mode: if flags & FLAG_CLAMPED != 0 {
            CoefficientMode::ClampedMean
        } else {
            CoefficientMode::Magnitude
        },
        dataset_hash,
    };
    if !c.is_valid() {
        return Err(KvwError::CorruptFile("coefficient cache holds negative or non-finite values".into()));
    }
    Ok(c)
}

pub fn save_coeffs(c: &KnowledgeCoefficients, path: &Path) -> Result<()> {
    fs::write(path, write_coeffs(c)).map_err(|e| KvwError::io(path, e))
}

pub fn load_coeffs(path: &Path) -> Result<KnowledgeCoefficients> {
    let bytes = fs::read(path).map_err(|e| KvwError::io(path, e))?;
    read_coeffs(&bytes)
}
