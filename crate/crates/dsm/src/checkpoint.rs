//! Binary parameter checkpoints.
//!
//! Layout: 4 magic bytes, a little-endian `u32` manifest length, the UTF-8
//! JSON manifest, then the data blob. The manifest lists every tensor as
//! `{name, dtype, shape, offset, checksum}` sorted by name, offsets relative
//! to the blob start and checksums CRC-32 of the tensor's bytes. Tensors are
//! little-endian `f64`. Run metadata travels as one extra entry named
//! [`META_ENTRY`] with dtype `json`, its bytes stored in the blob like a tensor.

use std::path::Path;

use dsm_core::{ModelParams, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::{Error, Result};

pub const DSM_MAGIC: [u8; 4] = *b"DSM1";
pub const LM_MAGIC: [u8; 4] = *b"LMB1";
pub const META_ENTRY: &str = "__meta__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub checksum: u32,
}

/// Serializes parameters and metadata to checkpoint bytes.
pub fn encode(magic: [u8; 4], params: &ModelParams, meta: &serde_json::Value) -> Vec<u8> {
    let meta_bytes = serde_json::to_vec(meta).expect("json value serializes");
    let mut chunks: Vec<(String, &str, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), "f64", t.shape().to_vec(), bytes)
        })
        .collect();
    chunks.push((META_ENTRY.into(), "json", vec![meta_bytes.len()], meta_bytes));
    chunks.sort_by(|a, b| a.0.cmp(&b.0));
    let mut manifest = Vec::with_capacity(chunks.len());
    let mut blob = Vec::new();
    for (name, dtype, shape, bytes) in chunks {
        manifest.push(ManifestEntry { name, dtype: dtype.into(), shape, offset: blob.len() as u64, checksum: crc32fast::hash(&bytes) });
        blob.extend_from_slice(&bytes);
    }
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + manifest.len() + blob.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    out
}

fn entry_len(e: &ManifestEntry) -> std::result::Result<usize, CheckpointError> {
    match e.dtype.as_str() {
        "f64" => Ok(e.shape.iter().product::<usize>() * 8),
        "json" if e.shape.len() == 1 => Ok(e.shape[0]),
        other => Err(CheckpointError::Manifest(format!("entry {} has unsupported dtype {other}", e.name))),
    }
}

/// Parses checkpoint bytes.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> std::result::Result<(ModelParams, serde_json::Value), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated(format!("{} bytes, header needs 8", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(CheckpointError::BadMagic { found: bytes[..4].to_vec(), expected: magic });
    }
    let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let blob_start = 8usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("manifest length {manifest_len} exceeds file")))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[8..blob_start]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if !manifest.windows(2).all(|w| w[0].name < w[1].name) {
        return Err(CheckpointError::Manifest("entries not sorted by name".into()));
    }
    let blob = &bytes[blob_start..];
    let mut expected_offset = 0usize;
    let mut params = ModelParams::new();
    let mut meta = None;
    for e in &manifest {
        let len = entry_len(e)?;
        if e.offset as usize != expected_offset {
            return Err(CheckpointError::Manifest(format!("entry {} at offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let end = expected_offset + len;
        if end > blob.len() {
            return Err(CheckpointError::Truncated(format!("entry {} ends at {end}, blob has {}", e.name, blob.len())));
        }
        let chunk = &blob[expected_offset..end];
        if crc32fast::hash(chunk) != e.checksum {
            return Err(CheckpointError::Checksum(e.name.clone()));
        }
        expected_offset = end;
        if e.dtype == "json" {
            if e.name != META_ENTRY {
                return Err(CheckpointError::Manifest(format!("json entry {} is not metadata", e.name)));
            }
            meta = Some(serde_json::from_slice(chunk).map_err(|err| CheckpointError::Manifest(err.to_string()))?);
            continue;
        }
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Shape(format!("{}: {err}", e.name)))?;
        params.insert(e.name.clone(), tensor);
    }
    if expected_offset != blob.len() {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes after the last entry", blob.len() - expected_offset)));
    }
    let meta = meta.ok_or_else(|| CheckpointError::Manifest(format!("missing {META_ENTRY} entry")))?;
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, magic: [u8; 4], params: &ModelParams, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(magic, params, meta)).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path, magic: [u8; 4]) -> Result<(ModelParams, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(magic, &bytes).map_err(|source| Error::Checkpoint { path: path.into(), source })
}

/// Checks loaded tensors against the layout a config implies, naming the
/// first mismatched tensor.
pub fn check_against(loaded: &ModelParams, expected: &ModelParams) -> std::result::Result<(), CheckpointError> {
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            None => return Err(CheckpointError::Shape(format!("tensor {name} missing"))),
            Some(l) if l.shape() != t.shape() => {
                return Err(CheckpointError::Shape(format!("tensor {name} has shape {:?}, config implies {:?}", l.shape(), t.shape())))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| expected.get(n).is_none()) {
        return Err(CheckpointError::Shape(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
