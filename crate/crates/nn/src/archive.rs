//! Single-file tensor archive: a JSON manifest followed by raw little-endian
//! `f32` blobs.
//!
//! Layout: 8-byte magic `FSARCHV1`, `u64` LE manifest length, manifest JSON,
//! then the blobs back to back in manifest order. The manifest records each
//! tensor's name, shape, dtype, and byte offset into the blob section.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Tensor;

const MAGIC: &[u8; 8] = b"FSARCHV1";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("archive manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, prefix: &str, tensors: Vec<(String, Tensor<f32>)>) {
        for (n, t) in tensors {
            self.tensors.push((format!("{prefix}{n}"), t));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let len = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        let manifest = Manifest {
            format: "farsight-archive".into(),
            version: 1,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ArchiveError::Format("bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| ArchiveError::Format("manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format != "farsight-archive" || manifest.version != 1 {
            return Err(ArchiveError::Format(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blobs = &bytes[16 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(ArchiveError::Format(format!("{}: dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.len as usize != n * 4 {
                return Err(ArchiveError::Format(format!("{}: length/shape mismatch", e.name)));
            }
            let raw = blobs
                .get(e.offset as usize..(e.offset + e.len) as usize)
                .ok_or_else(|| ArchiveError::Format(format!("{}: blob out of range", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        let bytes = self.to_bytes()?;
        let io_err = |source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
