// SPDX-License-Identifier: Apache-2.0

//! Binary parameter container.
//!
//! Layout: the 8-byte magic `EVGZCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! every tensor listed in the header as little-endian `f64`s in row-major
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_atomic;
use crate::diffcore::{Activation, Linear, Mlp, Tensor2};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EVGZCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form metadata: dimensions, activations, upstream checksums.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor2>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind: kind.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                meta: BTreeMap::new(),
                tensors: Vec::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.header.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .meta
            .get(key)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing metadata {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn push(&mut self, name: &str, t: &Tensor2) {
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        });
        self.tensors.insert(name.to_string(), t.clone());
    }

    pub fn push_mlp(&mut self, prefix: &str, mlp: &Mlp) -> Result<()> {
        self.set_meta(&format!("{prefix}.activation"), mlp.hidden_activation)?;
        for (i, l) in mlp.layers.iter().enumerate() {
            self.push(&format!("{prefix}.{i}.weight"), &l.weight);
            self.push(&format!("{prefix}.{i}.bias"), &l.bias);
        }
        Ok(())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor2> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing tensor {name:?}")))
    }

    pub fn take_mlp(&mut self, prefix: &str) -> Result<Mlp> {
        let hidden_activation: Activation = self.meta(&format!("{prefix}.activation"))?;
        let mut layers = Vec::new();
        while self.tensors.contains_key(&format!("{prefix}.{}.weight", layers.len())) {
            let i = layers.len();
            let weight = self.take(&format!("{prefix}.{i}.weight"))?;
            let bias = self.take(&format!("{prefix}.{i}.bias"))?;
            if bias.shape() != (1, weight.cols()) {
                return Err(Error::malformed("checkpoint", format!("{prefix}.{i} bias shape")));
            }
            if let Some(prev) = layers.last().map(|l: &Linear| l.weight.cols()) {
                if prev != weight.rows() {
                    return Err(Error::malformed("checkpoint", format!("{prefix}.{i} input size")));
                }
            }
            layers.push(Linear { weight, bias });
        }
        if layers.is_empty() {
            return Err(Error::malformed("checkpoint", format!("no layers under {prefix:?}")));
        }
        Ok(Mlp {
            layers,
            hidden_activation,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            let t = &self.tensors[&e.name];
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::malformed("checkpoint", d.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut offset = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor2::from_vec(e.rows, e.cols, data)?);
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over the shapes and little-endian bytes of `tensors`.
pub fn tensor_checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor2>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
