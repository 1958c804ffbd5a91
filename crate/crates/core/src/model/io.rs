//! Model container: one text line `KVWM <version> <header_bytes>`, a JSON
//! header (config, tensor table, payload checksum), then the raw
//! little-endian `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KvwError, Result};
use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::Matrix;

pub const MODEL_MAGIC: &str = "KVWM";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

/// Config with enum tags kept as strings so unknown tags surface as version
/// errors rather than parse failures.
#[derive(Serialize, Deserialize)]
struct RawConfig {
    num_layers: usize,
    d_model: usize,
    ffn_dim: usize,
    num_heads: usize,
    vocab_size: usize,
    max_seq_len: usize,
    activation: String,
    ffn_variant: String,
    norm: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RawConfig,
    payload_bytes: usize,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

struct TensorTable<'a>(BTreeMap<&'a str, (&'a TensorEntry, &'a [u8])>);

impl TensorTable<'_> {
    fn take(&mut self, name: &str, want: &[usize]) -> Result<Vec<f32>> {
        let (entry, raw) = self
            .0
            .remove(name)
            .ok_or_else(|| KvwError::CorruptFile(format!("missing tensor {name}")))?;
        if entry.shape != want {
            return Err(KvwError::CorruptFile(format!(
                "tensor {name} has shape {:?}, config implies {want:?}",
                entry.shape
            )));
        }
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn write_model(weights: &ModelWeights, config: &ModelConfig) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in weights.named_tensors() {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset,
            nbytes: data.len() * 4,
        });
    }
    let header = Header {
        config: RawConfig {
            num_layers: config.num_layers,
            d_model: config.d_model,
            ffn_dim: config.ffn_dim,
            num_heads: config.num_heads,
            vocab_size: config.vocab_size,
            max_seq_len: config.max_seq_len,
            activation: config.activation.as_str().into(),
            ffn_variant: config.ffn_variant.as_str().into(),
            norm: config.norm.as_str().into(),
        },
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let header_json = serde_json::to_string_pretty(&header)?;
    let mut out = format!("{MODEL_MAGIC} {FORMAT_VERSION} {}\n", header_json.len()).into_bytes();
    out.extend_from_slice(header_json.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_model(weights: &ModelWeights, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_model(weights, config)?;
    std::fs::write(path, bytes).map_err(|e| KvwError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelWeights, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| KvwError::io(path, e))?;
    read_model(&bytes)
}

pub fn read_model(bytes: &[u8]) -> Result<(ModelWeights, ModelConfig)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| KvwError::CorruptFile("missing container preamble".into()))?;
    let preamble = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| KvwError::CorruptFile("preamble is not utf-8".into()))?;
    let mut parts = preamble.split_whitespace();
    if parts.next() != Some(MODEL_MAGIC) {
        return Err(KvwError::CorruptFile("not a model container".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| KvwError::CorruptFile("unreadable format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(KvwError::Version(format!(
            "container format version {version} is not supported"
        )));
    }
    let header_len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| KvwError::CorruptFile("unreadable header length".into()))?;
    let header_start = newline + 1;
    let payload_start = header_start
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| KvwError::CorruptFile("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| KvwError::CorruptFile(format!("malformed header: {e}")))?;
    let payload = &bytes[payload_start..];

    let raw = &header.config;
    let config = ModelConfig {
        num_layers: raw.num_layers,
        d_model: raw.d_model,
        ffn_dim: raw.ffn_dim,
        num_heads: raw.num_heads,
        vocab_size: raw.vocab_size,
        max_seq_len: raw.max_seq_len,
        activation: raw.activation.parse()?,
        ffn_variant: raw.ffn_variant.parse()?,
        norm: raw.norm.parse()?,
    };
    config.validate()?;

    let mut tensors: BTreeMap<&str, (&TensorEntry, &[u8])> = BTreeMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(KvwError::Version(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let elems: usize = entry.shape.iter().product();
        if entry.nbytes != elems * 4 {
            return Err(KvwError::CorruptFile(format!(
                "tensor {} declares shape {:?} but spans {} bytes",
                entry.name, entry.shape, entry.nbytes
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.nbytes)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                KvwError::CorruptFile(format!("payload truncated inside tensor {}", entry.name))
            })?;
        tensors.insert(entry.name.as_str(), (entry, &payload[entry.offset..end]));
    }
    if payload.len() != header.payload_bytes {
        return Err(KvwError::CorruptFile(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(KvwError::CorruptFile("payload checksum mismatch".into()));
    }

    let d = config.d_model;
    let m = config.ffn_dim;
    let mut table = TensorTable(tensors);
    let take = |t: &mut TensorTable, name: String, want: &[usize]| t.take(&name, want);
    let matrix = |t: &mut TensorTable, name: String, rows: usize, cols: usize| -> Result<Matrix> {
        let data = t.take(&name, &[rows, cols])?;
        Ok(Matrix::from_vec(rows, cols, data).expect("length checked against shape"))
    };

    let embedding = matrix(&mut table, "embedding".into(), config.vocab_size, d)?;
    let position = matrix(&mut table, "position".into(), config.max_seq_len, d)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = format!("layers.{l}.");
        let attn_norm = take(&mut table, format!("{p}attn_norm"), &[d])?;
        let attn_q = matrix(&mut table, format!("{p}attn_q"), d, d)?;
        let attn_k = matrix(&mut table, format!("{p}attn_k"), d, d)?;
        let attn_v = matrix(&mut table, format!("{p}attn_v"), d, d)?;
        let attn_o = matrix(&mut table, format!("{p}attn_o"), d, d)?;
        let ffn_norm = take(&mut table, format!("{p}ffn_norm"), &[d])?;
        let ffn_key = matrix(&mut table, format!("{p}ffn_key"), m, d)?;
        let ffn_gate = match config.ffn_variant {
            crate::model::FfnVariant::Gated => Some(matrix(&mut table, format!("{p}ffn_gate"), m, d)?),
            crate::model::FfnVariant::Plain => None,
        };
        let ffn_value = matrix(&mut table, format!("{p}ffn_value"), m, d)?;
        layers.push(LayerWeights {
            attn_norm,
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            ffn_norm,
            ffn_key,
            ffn_gate,
            ffn_value,
        });
    }
    let final_norm = take(&mut table, "final_norm".into(), &[d])?;
    let unembedding = matrix(&mut table, "unembedding".into(), config.vocab_size, d)?;
    if let Some(extra) = table.0.keys().next() {
        return Err(KvwError::CorruptFile(format!("unexpected tensor {extra}")));
    }

    let weights = ModelWeights {
        embedding,
        position,
        layers,
        final_norm,
        unembedding,
    };
    weights.check_finite()?;
    Ok((weights, config))
}
