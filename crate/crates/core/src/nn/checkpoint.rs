//! `CKPT1` container: magic, a JSON metadata block, then tensor blocks.
//!
//! ```text
//! "CKPT1"
//! u32 LE  metadata length, then that many bytes of UTF-8 JSON
//! u32 LE  tensor count
//! per tensor:
//!   u32 LE name length, UTF-8 name
//!   u8     rank
//!   rank x u32 LE dims
//!   prod(dims) x f32 LE values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<u8>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: Vec<u8>) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store`, names prefixed with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, p) in store.iter() {
            self.tensors
                .push((format!("{prefix}{name}"), p.value.clone()));
        }
    }

    /// Builds a store from every tensor whose name starts with `prefix`.
    pub fn store(&self, prefix: &str, seed: u64) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new(seed);
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone())?;
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len_u32(self.meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&self.meta);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::invalid(format!("tensor `{name}` rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dim")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Version(format!(
                "expected checkpoint magic CKPT1, found {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Header("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let need = numel * 4;
            if r.len() < need {
                return Err(Error::PayloadSize {
                    expected: need,
                    found: r.len(),
                });
            }
            let (payload, rest) = r.split_at(need);
            r = rest;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::PayloadSize {
                expected: bytes.len() - r.len(),
                found: bytes.len(),
            });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} exceeds u32")))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Header("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
