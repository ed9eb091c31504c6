//! Binary checkpoint layout:
//!
//! ```text
//! magic     8 bytes  "LRKANCKP"
//! version   u32 LE
//! length    u64 LE   manifest byte length
//! manifest  JSON     configs, counters, history, tensor table
//! payload            raw little-endian tensor data at manifest offsets
//! checksum  32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use reskan_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

pub const MAGIC: &[u8; 8] = b"LRKANCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

/// A named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub role: TensorRole,
    pub value: Tensor<T>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Seed the model was initialized from.
    pub model_seed: u64,
    /// Completed epochs; every random stream of the next epoch is derived
    /// from `(train.seed, completed_epochs)`.
    pub completed_epochs: usize,
    pub optimizer_step: u64,
    pub history: Vec<EpochMetrics>,
    pub tensors: Vec<NamedTensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    network: NetworkConfig,
    train: TrainConfig,
    model_seed: u64,
    completed_epochs: usize,
    optimizer_step: u64,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len() as u64;
            for &v in t.value.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                role: t.role,
                dtype: T::DTYPE.name().to_string(),
                shape: t.value.shape().to_vec(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            network: self.network.clone(),
            train: self.train.clone(),
            model_seed: self.model_seed,
            completed_epochs: self.completed_epochs,
            optimizer_step: self.optimizer_step,
            history: self.history.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Runtime(format!("cannot encode manifest: {e}")))?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(integrity(format!("checkpoint is truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(integrity("not a light-reskan checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(integrity(format!("checkpoint version {version} is not supported (expected {VERSION})")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checksum mismatch: checkpoint is corrupt or truncated"));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20usize.saturating_add(len)).ok_or_else(|| integrity("manifest extends past the end"))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| integrity(format!("unreadable manifest: {e}")))?;
        let payload = &body[20 + len..];
        let width = T::DTYPE.size_of();
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in m.tensors {
            if e.dtype != T::DTYPE.name() {
                return Err(integrity(format!("tensor {} is {}, expected {}", e.name, e.dtype, T::DTYPE.name())));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + numel * width)
                .filter(|_| e.bytes as usize == numel * width)
                .ok_or_else(|| integrity(format!("tensor {} lies outside the payload", e.name)))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push(NamedTensor { name: e.name, role: e.role, value: Tensor::new(e.shape, data)? });
        }
        Ok(Checkpoint {
            network: m.network,
            train: m.train,
            model_seed: m.model_seed,
            completed_epochs: m.completed_epochs,
            optimizer_step: m.optimizer_step,
            history: m.history,
            tensors,
        })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensors(&self, role: TensorRole) -> impl Iterator<Item = &NamedTensor<T>> {
        self.tensors.iter().filter(move |t| t.role == role)
    }
}
