//! Model file: `NPSC`, version byte, u32-LE length-prefixed JSON header, then
//! little-endian `f32` weights in layer order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::ModelSpec;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NPSC";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    shape: Vec<usize>,
}

pub fn model_to_bytes(weights: &ModelWeights, spec: &ModelSpec) -> Result<Vec<u8>> {
    let header = Header {
        spec: spec.clone(),
        seed: weights.seed,
        tensors: weights
            .iter()
            .map(|(layer, t)| TensorEntry {
                layer,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let numel: usize = weights.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(9 + json.len() + 4 * numel);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in weights.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(ModelSpec, ModelWeights)> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a model file (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(format!("unsupported model version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let json = bytes
        .get(9..9 + hlen)
        .ok_or_else(|| Error::format("truncated model header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(format!("model header: {e}")))?;
    let spec = header.spec;
    let shapes = spec.shapes().map_err(|e| Error::format(e.to_string()))?;
    let mut params: Vec<Option<Tensor>> = vec![None; spec.layers.len()];
    let mut body = &bytes[9 + hlen..];
    for entry in header.tensors {
        let Some(layer) = spec.layers.get(entry.layer) else {
            return Err(Error::format(format!("tensor for missing layer {}", entry.layer)));
        };
        let want = layer.param_shape(&spec.input_shape_of(&shapes, entry.layer));
        if want.as_deref() != Some(entry.shape.as_slice()) || params[entry.layer].is_some() {
            return Err(Error::format(format!(
                "layer {}: stored shape {:?} does not match spec {:?}",
                entry.layer, entry.shape, want
            )));
        }
        let n: usize = entry.shape.iter().product();
        if body.len() < 4 * n {
            return Err(Error::format("truncated model weights"));
        }
        let (chunk, rest) = body.split_at(4 * n);
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params[entry.layer] = Some(Tensor::new(entry.shape, data)?);
        body = rest;
    }
    if !body.is_empty() {
        return Err(Error::format(format!("{} trailing bytes after weights", body.len())));
    }
    let weights = ModelWeights::new(&spec, header.seed, params).map_err(|e| Error::format(e.to_string()))?;
    Ok((spec, weights))
}

pub fn save_model(weights: &ModelWeights, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(weights, spec)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, ModelWeights)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    model_from_bytes(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.as_ref().display())))
}

/// Hex SHA-256 of the serialized model.
pub fn model_hash(weights: &ModelWeights, spec: &ModelSpec) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model_to_bytes(weights, spec)?)))
}
