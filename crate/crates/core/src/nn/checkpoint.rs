//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"SASVCKPT"            8 bytes magic
//! u32 LE                 header length in bytes
//! header                 JSON, see [`CheckpointHeader`]
//! tensor data            little-endian f32, tensors in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Module;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SASVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    /// Free-form model description (architecture hyperparameters).
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_checkpoint_bytes<T: Scalar, M: Module<T>>(module: &M, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let named = module.named_tensors();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: "f32le".into(),
        meta: meta.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * module.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for &x in &t.data {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar, M: Module<T>>(path: &Path, module: &M, meta: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, to_checkpoint_bytes(module, meta)).map_err(|e| Error::io(path, e))
}

/// Splits a checkpoint into its header and flat tensor data.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut pos = 12 + hlen;
    let mut data = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let chunk = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        data.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, data))
}

/// Loads tensors into an already-constructed module of matching structure.
pub fn load_checkpoint<T: Scalar, M: Module<T>>(bytes: &[u8], module: &mut M) -> Result<CheckpointHeader> {
    let (header, data) = read_checkpoint(bytes)?;
    let names: Vec<(String, Vec<usize>)> = module
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, checkpoint has {}",
            names.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), entry) in names.iter().zip(&header.tensors) {
        if name != &entry.name || shape != &entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
    }
    for (t, d) in module.tensors_mut().into_iter().zip(data) {
        t.data = d.into_iter().map(|x| T::of(x as f64)).collect();
    }
    Ok(header)
}
