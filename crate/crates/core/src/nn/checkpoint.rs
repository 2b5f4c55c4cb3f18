//! `sadrive-ckpt v1`: a magic line, a little-endian `u64` manifest length,
//! a JSON manifest of `(name, shape, offset)` entries plus an opaque config
//! string, then the concatenated `f32` little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "sadrive-ckpt v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode_checkpoint(params: &ParamStore<f32>, config: &str) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let manifest = serde_json::to_vec(&Manifest { config: config.to_string(), tensors: entries })
        .expect("manifest serializes");
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 9 + manifest.len() + offset * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let bad = |detail: &str| Error::Format { what: "checkpoint", detail: detail.to_string() };
    let header = CHECKPOINT_MAGIC.len() + 1;
    if bytes.len() < header + 8 || &bytes[..header - 1] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad("missing sadrive-ckpt v1 header"));
    }
    let len = u64::from_le_bytes(bytes[header..header + 8].try_into().expect("8 bytes")) as usize;
    let body = header + 8;
    let manifest: Manifest = serde_json::from_slice(
        bytes.get(body..body + len).ok_or_else(|| bad("truncated manifest"))?,
    )
    .map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[body + len..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| bad(&format!("tensor {} exceeds payload", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.add(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok((store, manifest.config))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, config: &str) -> Result<()> {
    let bytes = encode_checkpoint(params, config);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
