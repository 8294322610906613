//! Binary tensor container shared by model checkpoints and persisted datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      5 bytes   "GGATE" (checkpoints) or "GDATA" (datasets)
//! version    u16
//! meta_len   u32       byte length of the metadata block
//! metadata   UTF-8     one `key=value` per line, '\n'-terminated
//! count      u32       number of tensor records
//! records    count x { name_len u32, name, rank u8, dims u64 x rank, f64 x prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 5] = *b"GGATE";
pub const DATASET_MAGIC: [u8; 5] = *b"GDATA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 5] },
    #[error("unsupported format version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("record mismatch: {0}")]
    Mismatch(String),
    #[error("missing metadata key `{0}`")]
    MissingKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An ordered metadata block plus ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 5],
    pub meta: Vec<(String, String)>,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(magic: [u8; 5]) -> Self {
        Self {
            magic,
            meta: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ContainerError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| ContainerError::CorruptHeader(format!("unparsable `{key}` value {raw:?}")))
    }

    pub fn record(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::Mismatch(format!("missing record `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(['=', '\n']) && !v.contains('\n'));
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 5]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(5)?;
        if found != magic {
            return Err(ContainerError::BadMagic {
                found: found.to_vec(),
                expected: magic,
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let meta_len = r.u32()? as usize;
        let meta_raw = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| ContainerError::CorruptHeader("metadata is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in meta_raw.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::CorruptHeader(format!("bad metadata line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::CorruptHeader("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| ContainerError::CorruptHeader(format!("record `{name}` dims overflow")))?;
            let payload = r.take(n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| ContainerError::CorruptHeader(format!("record `{name}`: {e}")))?;
            records.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::CorruptHeader(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            magic,
            meta,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, magic: [u8; 5]) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
