//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "SCRF" | u32 version | u32 tensor count
//!   per tensor: u16 name len | name UTF-8 | u8 rank | u32 dims... | f32 data...
//!   u32 metadata len | UTF-8 JSON { config, iteration }
//!
//! Round-trips are bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scarfnet_core::{ParamStore, Tensor};

use crate::config::TrainConfig;

pub const MAGIC: [u8; 4] = *b"SCRF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] scarfnet_core::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    iteration: u64,
}

/// Named parameter tensors plus the config and iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// (name, dims, values) in store (lexicographic) order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub config: TrainConfig,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: &TrainConfig, iteration: u64) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(name, t)| (name.to_string(), t.dims().to_vec(), t.data().to_vec()))
                .collect(),
            config: config.clone(),
            iteration,
        }
    }

    /// Copy the stored values into an already-registered store; dims and
    /// names must match the registered architecture.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, dims, data) in &self.tensors {
            let t = Tensor::from_vec(dims.clone(), data.clone())
                .map_err(CheckpointError::Model)?;
            store.set(name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            iteration: self.iteration,
        })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|e| CheckpointError::Malformed(format!("tensor name: {e}")))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(4 * numel, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, dims, data));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: Meta = serde_json::from_slice(meta_bytes)?;
        Ok(Self {
            tensors,
            config: meta.config,
            iteration: meta.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.w".into(), vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]),
                ("b".into(), vec![1], vec![0.5]),
            ],
            config: TrainConfig::default(),
            iteration: 123,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn future_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncation() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 7, 11, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated(_))
            ));
        }
    }
}
