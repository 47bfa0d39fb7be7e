//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EMDXCKPT"
//! version  u32      1
//! dtype    u8       4 = f32, 8 = f64
//! mlen     u64      byte length of the manifest
//! manifest mlen     UTF-8 JSON {"tensors": [CheckpointEntry...], "metadata": any}
//! payload  ...      raw element bytes, tensors back to back in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"EMDXCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        self.width() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<CheckpointEntry>,
    metadata: serde_json::Value,
}

/// Parameters plus free-form metadata (configs echoed by the caller).
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    params: &ParamStore<T>,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.num_scalars() * T::DTYPE.width());
    for (_, p) in params.iter() {
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        metadata: metadata.clone(),
    })
    .map_err(|e| bad(e.to_string()))?;

    let mut out = Vec::with_capacity(21 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dtype stored in a checkpoint file, without decoding the payload.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    DType::from_code(bytes[12]).ok_or_else(|| bad("unknown dtype"))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 21 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[12]).ok_or_else(|| bad("unknown dtype"))?;
    if dtype != T::DTYPE {
        return Err(bad(format!(
            "dtype mismatch: file holds {dtype:?}, caller expects {:?}",
            T::DTYPE
        )));
    }
    let mlen = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    let manifest_end = 21usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[21..manifest_end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[manifest_end..];
    let width = dtype.width();

    let mut params = ParamStore::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * width;
        if end > payload.len() {
            return Err(bad(format!("truncated payload for {}", entry.name)));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        params.add(entry.name, Tensor::from_vec(entry.shape, data)?);
    }
    Ok(Checkpoint {
        params,
        metadata: manifest.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::matrix(2, 2, vec![0.1, -0.0, 1e-300, f64::MAX]).unwrap());
        store.add("b", Tensor::vector(vec![std::f64::consts::PI]));
        let meta = serde_json::json!({"note": "x"});
        write_checkpoint(&path, &store, &meta).unwrap();
        let back = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.metadata, meta);
        for ((_, a), (_, b)) in store.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(checkpoint_dtype(&path).unwrap(), DType::F64);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::vector(vec![1.5f32]));
        write_checkpoint(&path, &store, &serde_json::Value::Null).unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
        assert_eq!(read_checkpoint::<f32>(&path).unwrap().params.value(crate::tensor::ParamId(0)).data(), &[1.5f32]);
    }
}
