//! Versioned binary container for named f64 tensors. Checkpoints, cached
//! datasets, and probe sets all share this one format.
//!
//! Layout, all integers little-endian:
//!   magic "DBCKPT01"
//!   u32 tensor count
//!   per tensor: u32 name length, UTF-8 name bytes, u32 rank,
//!               u64 per dimension, then product(dims) f64 values.
//!
//! Reads distinguish three failure kinds: a corrupt header (bad magic), a
//! nonsensical shape table (bad UTF-8, absurd rank, duplicate names,
//! trailing bytes), and a truncated payload (clean structure, missing
//! bytes). Writes go through a temp file and rename so a crash never leaves
//! a half-written file at the target path.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DBCKPT01";

const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "shape/value length mismatch");
        NamedTensor {
            name: name.into(),
            shape,
            values,
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::CorruptHeader {
            reason: format!("bad magic {:02x?}", &magic[..magic.len().min(8)]),
        });
    }
    let count = cur.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut seen = HashSet::new();
    for i in 0..count {
        let name_len = cur.u32()?;
        if name_len > MAX_NAME {
            return Err(Error::ShapeTable {
                reason: format!("tensor {i}: name length {name_len} exceeds {MAX_NAME}"),
            });
        }
        let name_bytes = cur.take(name_len as usize)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::ShapeTable {
                reason: format!("tensor {i}: name is not valid UTF-8"),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::ShapeTable {
                reason: format!("duplicate tensor name '{name}'"),
            });
        }
        let rank = cur.u32()?;
        if rank > MAX_RANK {
            return Err(Error::ShapeTable {
                reason: format!("tensor '{name}': rank {rank} exceeds {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64()?;
            elems = elems.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        if elems > MAX_ELEMENTS {
            return Err(Error::ShapeTable {
                reason: format!("tensor '{name}': {elems} elements exceeds {MAX_ELEMENTS}"),
            });
        }
        let raw = cur.take(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(NamedTensor { name, shape, values });
    }
    if cur.pos != bytes.len() {
        return Err(Error::ShapeTable {
            reason: format!("{} trailing bytes after last tensor", bytes.len() - cur.pos),
        });
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Writes to a temp file next to `path`, fsyncs, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::TruncatedPayload {
                expected: n,
                actual: left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
