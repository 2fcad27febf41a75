//! Parameter checkpoint container.
//!
//! ```text
//! magic      8 bytes  "OCTCKPT\0"
//! version    u32      1
//! header_len u32
//! header     JSON     {kind, config, meta, tensors: [{name, shape}]}
//! data       f32 little-endian values of every tensor, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{format, Result};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the tensors describe, e.g. `"generator"` or `"cyclegan"`.
    pub kind: String,
    /// Echo of the configuration that produced the tensors.
    pub config: Value,
    /// Free-form metadata (counters, RNG state, provenance).
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            meta: Value::Null,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| format(format!("checkpoint has no tensor {name:?}")))
    }

    /// Overwrite every parameter of `store` from the tensors under `prefix/`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let name = format!("{prefix}/{}", store.names()[i]);
            let t = self.require(&name)?;
            if t.shape() != store.get(i).shape() {
                return Err(format(format!(
                    "{name}: shape {:?} in checkpoint, {:?} expected",
                    t.shape(),
                    store.get(i).shape()
                )));
            }
            *store.get_mut(i) = t.clone();
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(format(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let short = || format("truncated checkpoint");
        if buf.len() < 16 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let hbytes = buf.get(16..16 + hlen).ok_or_else(short)?;
        let header: Header = serde_json::from_slice(hbytes)
            .map_err(|e| format(format!("corrupt checkpoint header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let bytes = buf.get(pos..pos + 4 * n).ok_or_else(short)?;
            pos += 4 * n;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Tensor::new(&entry.shape, data)));
        }
        if pos != buf.len() {
            return Err(format("trailing bytes after checkpoint tensors"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
