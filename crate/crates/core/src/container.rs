//! Portable named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TNSC" | version u16 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f64 × Π dims )
//! ```
//!
//! Entries are written in name order, so equal maps serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TNSC";
pub const VERSION: u16 = 1;

pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated while reading {entry}")]
    Truncated { entry: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name in entry {index} is not valid utf-8")]
    InvalidUtf8 { index: usize },
    #[error("{0} unexpected bytes after the last entry")]
    TrailingBytes(usize),
    #[error("cannot encode entry {entry}: {msg}")]
    Unencodable { entry: String, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(map: &TensorMap) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(map.len()).map_err(|_| ContainerError::Unencodable {
        entry: "<header>".into(),
        msg: "too many entries".into(),
    })?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in map {
        let bad = |msg: &str| ContainerError::Unencodable {
            entry: name.clone(),
            msg: msg.into(),
        };
        let len = u16::try_from(name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.ndim()).map_err(|_| bad("rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad("dimension does not fit in u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated {
                entry: entry.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, entry: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, entry)?.try_into().unwrap()))
    }

    fn u32(&mut self, entry: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap, ContainerError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "<header>").map_err(|_| ContainerError::BadMagic)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = c.u16("<header>")?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = c.u32("<header>")?;
    let mut map = TensorMap::new();
    for index in 0..count as usize {
        let placeholder = format!("entry #{index}");
        let len = c.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(c.take(len, &placeholder)?)
            .map_err(|_| ContainerError::InvalidUtf8 { index })?
            .to_string();
        let rank = c.take(1, &name)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32(&name)? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = c.take(
            n.checked_mul(8).ok_or_else(|| ContainerError::Truncated { entry: name.clone() })?,
            &name,
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("payload length matches dims");
        if map.insert(name.clone(), t).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
    }
    if c.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(map)
}

pub fn write_container(map: &TensorMap, path: &Path) -> Result<(), ContainerError> {
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<TensorMap, ContainerError> {
    decode(&fs::read(path)?)
}
