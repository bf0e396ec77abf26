//! Named-tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping each
//! tensor name to its dtype, shape and byte range within the payload, then
//! the raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};
use crate::{Scalar, Tensor};

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offsets `[start, end)` into the payload.
    pub offsets: [usize; 2],
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "dexmode-ckpt-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<S>)>,
}

fn bad(msg: impl Into<String>) -> AdError {
    AdError::Checkpoint(msg.into())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let start = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: S::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offsets: [start, payload.len()],
            });
        }
        let header = CheckpointHeader {
            format: FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + h.len() + payload.len());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(bad("file shorter than header length field"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format {}", header.format)));
        }
        let payload = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != S::DTYPE {
                return Err(bad(format!("{}: dtype {} but reader expects {}", e.name, e.dtype, S::DTYPE)));
            }
            let [start, end] = e.offsets;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(format!("{}: byte range out of bounds", e.name)))?;
            if raw.len() % S::BYTES != 0 {
                return Err(bad(format!("{}: ragged byte range", e.name)));
            }
            let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
