//! Checkpoints: a JSON manifest plus one little-endian `f32` blob.
//!
//! The blob sits next to the manifest with the extension `.bin`. Tensor
//! offsets count `f32` elements from the start of the blob.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub format_version: u32,
    pub config: C,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
}

pub fn save_checkpoint<T: Real, C: Serialize>(path: impl AsRef<Path>, config: &C, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let blob_path = path.with_extension("bin");
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, p) in store.iter() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape(), offset });
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += p.value.len();
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config,
        tensors,
        blob: blob_path.file_name().unwrap().to_string_lossy().into_owned(),
    };
    fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into a fresh store (all parameters trainable).
pub fn load_checkpoint<T: Real, C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(C, ParamStore<T>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest<C> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let blob_path = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::SizeMismatch { expected: bytes.len() / 4 * 4 + 4, actual: bytes.len() });
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + n;
        if end > values.len() {
            return Err(Error::SizeMismatch { expected: end * 4, actual: bytes.len() });
        }
        let data = values[t.offset..end].iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        store.add(t.name.clone(), Tensor::from_vec(t.shape[0], t.shape[1], data)?)?;
    }
    Ok((manifest.config, store))
}
