//! The LCKP tensor container.
//!
//! ```text
//! "LCKP" | version: u8 = 1 | header_len: u32 LE | header: UTF-8 JSON | payloads
//! ```
//!
//! The header is `{"entries": [{"name", "dtype": "f32", "shape"}...], "metadata": {...}}`
//! and payloads are the entries' little-endian `f32` data concatenated in
//! header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every value (trainable and buffers) of a store, in store order.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> Self {
        let mut ck = Self::new(metadata);
        for p in store.iter() {
            ck.push(p.name.clone(), &p.value);
        }
        ck
    }

    /// Overwrites the store's values from this checkpoint. Every store entry
    /// must be present with the right shape.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| EntryHeader {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(9 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)
            .map_err(|_| Error::Checkpoint("truncated version".into()))?;
        if ver[0] != VERSION {
            return Err(Error::Version {
                expected: VERSION as u32,
                found: ver[0] as u32,
            });
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if r.len() < n * 4 {
                return Err(Error::Checkpoint(format!("{}: truncated payload", e.name)));
            }
            let data = r[..n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            r = &r[n * 4..];
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Restores a store that was saved with [`Checkpoint::from_store`], creating entries.
pub fn store_from_checkpoint<T: Scalar>(ck: &Checkpoint, trainable: impl Fn(&str) -> bool) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, t) in &ck.tensors {
        let kind = if trainable(name) { ParamKind::Trainable } else { ParamKind::Buffer };
        store.insert(name.clone(), kind, t.cast())?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"vocab": {"red": 2}}));
        ck.push("a.weight", &Tensor::<f32>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        ck.push("b", &Tensor::<f32>::scalar(-0.5));
        ck
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LCKP");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["entries"][0]["name"], "a.weight");
        assert_eq!(header["entries"][0]["dtype"], "f32");
        assert_eq!(header["entries"][0]["shape"], serde_json::json!([2, 3]));
        assert_eq!(bytes.len(), 9 + len + 7 * 4);
        assert_eq!(&bytes[9 + len..9 + len + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
    }
}
