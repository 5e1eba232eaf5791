//! Binary checkpoints: a 16-byte header, JSON metadata, then little-endian tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::oct::io::write_atomic;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"CHOROIDW";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model family, e.g. "bionet" or "biomarker".
    pub kind: String,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents in the file's stored precision.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub values: Vec<Tensor<T>>,
}

fn header(dtype: DType) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(MAGIC);
    h[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[12] = dtype.tag();
    h
}

pub fn encode<T: Scalar>(kind: &str, epoch: usize, config: serde_json::Value, stores: &[&ParamStore<T>]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    for store in stores {
        for (name, v) in store.names().iter().zip(store.values()) {
            tensors.push(TensorEntry { name: name.clone(), shape: v.shape() });
        }
    }
    let meta = CheckpointMeta { kind: kind.to_string(), epoch, config, tensors };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 + json.len() + stores.iter().map(|s| s.num_scalars()).sum::<usize>() * T::BYTES);
    out.extend_from_slice(&header(T::DTYPE));
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for store in stores {
        for v in store.values() {
            for &x in v.data() {
                x.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < HEADER_LEN + 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    if bytes[12] != T::DTYPE.tag() {
        return Err(Error::Checkpoint(format!("checkpoint stores dtype tag {}, expected {:?}", bytes[12], T::DTYPE)));
    }
    let json_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = 24usize.checked_add(json_len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[24..body]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut pos = body;
    let mut values = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * T::BYTES;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("truncated data for tensor '{}'", entry.name)));
        }
        let data = bytes[pos..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        values.push(Tensor::from_vec(entry.shape, data)?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint { meta, values })
}

pub fn save<T: Scalar>(path: &Path, kind: &str, epoch: usize, config: serde_json::Value, stores: &[&ParamStore<T>]) -> Result<()> {
    write_atomic(path, &encode(kind, epoch, config, stores)?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies stored tensors into `stores`, which must match the saved layout exactly.
    pub fn restore(&self, kind: &str, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!("checkpoint holds a '{}' model, expected '{kind}'", self.meta.kind)));
        }
        let expected: usize = stores.iter().map(|s| s.len()).sum();
        if expected != self.values.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model has {expected}", self.values.len())));
        }
        let mut i = 0;
        for store in stores.iter_mut() {
            let names: Vec<String> = store.names().to_vec();
            for (j, name) in names.iter().enumerate() {
                let entry = &self.meta.tensors[i];
                if &entry.name != name || store.values()[j].shape() != entry.shape {
                    return Err(Error::Checkpoint(format!("tensor {i}: checkpoint has '{}' {:?}, model expects '{name}'", entry.name, entry.shape)));
                }
                store.values_mut()[j] = self.values[i].clone();
                i += 1;
            }
        }
        Ok(())
    }
}
