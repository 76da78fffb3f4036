//! Versioned binary weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLKP"  u32 version  u32 entry_count
//! per entry:
//!   u32 name_len  name (UTF-8)  u8 dtype (0 = f64)  u32 rank  u64 dims[rank]
//!   payload: prod(dims) little-endian f64
//! ```

use std::path::Path;

use crate::error::ParamDiff;
use crate::params::{ParamStore, Parameters};

pub const MAGIC: [u8; 4] = *b"MLKP";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, not a weight archive")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated archive while reading {context}")]
    Truncated { context: String },
    #[error("entry {index}: name is not valid UTF-8")]
    InvalidName { index: usize },
    #[error("entry {name}: unsupported dtype tag {tag}")]
    UnsupportedDtype { name: String, tag: u8 },
    #[error("duplicate entry name {0}")]
    DuplicateName(String),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("archive does not match the model parameters: {0}")]
    NameMismatch(ParamDiff),
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8], ArchiveError> {
        if self.bytes.len() - self.pos < n {
            return Err(ArchiveError::Truncated { context: context() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: impl FnOnce() -> String) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, ArchiveError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("4 bytes"),
        None => {
            let mut m = [0; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(ArchiveError::BadMagic(m));
        }
    };
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion { found: version });
    }
    let count = r.u32(|| "entry count".into())? as usize;
    let mut store = ParamStore::new();
    for index in 0..count {
        let len = r.u32(|| format!("entry {index} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, || format!("entry {index} name"))?)
            .map_err(|_| ArchiveError::InvalidName { index })?
            .to_string();
        let tag = r.take(1, || format!("{name} dtype"))?[0];
        if tag != DTYPE_F64 {
            return Err(ArchiveError::UnsupportedDtype { name, tag });
        }
        let rank = r.u32(|| format!("{name} rank"))? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64(|| format!("{name} dims"))? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload = numel
            .and_then(|n| n.checked_mul(8))
            .filter(|&b| b <= bytes.len() - r.pos)
            .ok_or_else(|| ArchiveError::Truncated { context: format!("{name} payload") })?;
        let values = r
            .take(payload, || format!("{name} payload"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.get(&name).is_some() {
            return Err(ArchiveError::DuplicateName(name));
        }
        store.insert(&name, dims, values).expect("payload length checked");
    }
    if r.pos != bytes.len() {
        return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<(), ArchiveError> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ParamStore, ArchiveError> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads an archive into `params`, which must have exactly the stored names and dims.
pub fn load_params<P: Parameters>(path: &Path, params: &mut P) -> Result<(), ArchiveError> {
    let store = load_weights(path)?;
    let diff = store.diff(params);
    if !diff.is_empty() {
        return Err(ArchiveError::NameMismatch(diff));
    }
    store.load_into(params).expect("diff is empty");
    Ok(())
}
