//! Checkpoint container: an 8-byte magic, the manifest length as a
//! little-endian `u64`, a canonical-JSON manifest, then every tensor as
//! little-endian `f64` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_layout, DualEncoder, EncoderArch, ModelConfig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::canon::canonical_json;

pub const MAGIC: &[u8; 8] = b"MOPECKP1";
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length in the payload.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub vision: EncoderArch,
    pub text: EncoderArch,
    pub provenance: Vec<String>,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a model. Values are widened to `f64`.
pub fn encode_checkpoint<S: Scalar>(model: &DualEncoder<S>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in model.named_tensors() {
        let length = (t.len() * 8) as u64;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        vision: model.vision.arch.clone(),
        text: model.text.arch.clone(),
        provenance: model.provenance.clone(),
        dtype: "f64-le".into(),
        tensors,
    };
    let json = canonical_json(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for (_, t) in model.named_tensors() {
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(tensor: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        tensor: tensor.into(),
        reason: reason.into(),
    }
}

/// Parses a container. Every structural problem is reported as a format
/// error naming the offending tensor (or `manifest`); nothing partial is
/// returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualEncoder<f64>> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(format_err("manifest", "not a checkpoint container"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("manifest", format!("manifest length {len} overruns the file")))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER..end])
        .map_err(|e| format_err("manifest", format!("unreadable manifest: {e}")))?;
    if manifest.dtype != "f64-le" {
        return Err(format_err("manifest", format!("unsupported dtype {}", manifest.dtype)));
    }
    manifest
        .config
        .validate()
        .map_err(|e| format_err("manifest", e.to_string()))?;
    let payload = &bytes[end..];
    let layout = tensor_layout(&manifest.config, &manifest.vision, &manifest.text);
    if layout.len() != manifest.tensors.len() {
        return Err(format_err(
            "manifest",
            format!("{} tensors listed, architecture needs {}", manifest.tensors.len(), layout.len()),
        ));
    }
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(layout.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&layout) {
        let t = &entry.name;
        if t != name {
            return Err(format_err(t, format!("expected tensor {name} at this position")));
        }
        if &entry.shape != shape {
            return Err(format_err(t, format!("shape {:?}, architecture needs {:?}", entry.shape, shape)));
        }
        let n: usize = shape.iter().product();
        if entry.length != (n * 8) as u64 {
            return Err(format_err(t, format!("byte length {} for {n} values", entry.length)));
        }
        if entry.offset != expected_offset {
            return Err(format_err(t, format!("offset {} is not contiguous (expected {expected_offset})", entry.offset)));
        }
        let stop = entry
            .offset
            .checked_add(entry.length)
            .filter(|&s| s <= payload.len() as u64)
            .ok_or_else(|| format_err(t, "payload truncated"))?;
        let data: Vec<f64> = payload[entry.offset as usize..stop as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| format_err(t, e.to_string()))?);
        expected_offset = stop;
    }
    if expected_offset != payload.len() as u64 {
        return Err(format_err(
            "manifest",
            format!("{} trailing payload bytes", payload.len() as u64 - expected_offset),
        ));
    }
    Ok(DualEncoder::from_parts(
        manifest.config,
        manifest.vision,
        manifest.text,
        tensors,
        manifest.provenance,
    ))
}

pub fn save_checkpoint<S: Scalar>(model: &DualEncoder<S>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoder<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DualEncoder<f64> {
        let cfg = ModelConfig {
            d: 8,
            n_heads: 2,
            d_ff: Some(8),
            n_layers_v: 1,
            n_layers_t: 2,
            vocab_v: 5,
            vocab_t: 6,
            seq_v: 3,
            seq_t: 2,
            e: 4,
            seed: 3,
            ln_eps: 1e-5,
        };
        DualEncoder::init(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_a_tensor() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 8]).unwrap_err();
        match err {
            Error::Format { tensor, .. } => assert_eq!(tensor, "logit_scale"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { .. })));
    }
}
