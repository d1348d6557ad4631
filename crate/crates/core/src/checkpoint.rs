//! Checkpoint container: `checkpoint.json` (kind, hashes, free-form
//! metadata) plus `tensors.bin`, a sorted list of named float32 tensors.
//!
//! `tensors.bin` layout, all integers little-endian:
//!
//! ```text
//! magic  b"AMTN"
//! u32    format version
//! u32    tensor count
//! repeat:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank x u64 dimensions
//!   f32  x product(dimensions) values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::write_file;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const MAGIC: &[u8; 4] = b"AMTN";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub schema_hash: String,
    pub config_hash: String,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, schema_hash: String, config_hash: String, metadata: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: kind.to_string(),
                schema_hash,
                config_hash,
                metadata,
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    pub fn metadata<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.metadata.clone())
            .map_err(|e| Error::Config(format!("bad {} checkpoint metadata: {e}", self.meta.kind)))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {name} shape/data mismatch")));
            }
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&dir.join(TENSOR_FILE), &buf)?;
        let meta = serde_json::to_vec_pretty(&self.meta).expect("metadata serializes");
        write_file(&dir.join(META_FILE), &meta)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: meta_path,
                found: meta.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let tensor_path = dir.join(TENSOR_FILE);
        let data = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
        let malformed = |reason: &str| Error::Malformed {
            path: tensor_path.clone(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { data: &data, pos: 0 };
        if cur.take(4).ok_or_else(|| malformed("missing magic"))? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| malformed("missing version"))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: tensor_path,
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let count = cur.u32().ok_or_else(|| malformed("missing count"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let truncated = || malformed("truncated tensor record");
            let name_len = cur.u32().ok_or_else(truncated)? as usize;
            let name = String::from_utf8(cur.take(name_len).ok_or_else(truncated)?.to_vec())
                .map_err(|_| malformed("tensor name is not UTF-8"))?;
            let rank = cur.u32().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64().ok_or_else(truncated)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4).ok_or_else(truncated)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, NamedTensor { shape, data: values });
        }
        if cur.pos != data.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
