//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `NWCK`, format version `u32`,
//! then one record per parameter or buffer until end of file:
//! name length `u32`, name bytes, rank `u32`, dims `u32[rank]`,
//! values `f64[prod(dims)]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NWCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let records = store
        .params()
        .iter()
        .map(|p| (&p.name, &p.value))
        .chain(store.buffers().iter().map(|b| (&b.name, &b.value)));
    for (name, value) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint into `(name, tensor)` records.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Magic { what: "checkpoint".into(), expected: "NWCK".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { what: "checkpoint".into(), found: version, expected: VERSION });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Truncated {
            what: "checkpoint".into(),
            detail: e.to_string(),
        })?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        records.push((name, Tensor::new(dims, data)?));
    }
    Ok(records)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Loads values into an already-built store with the same layout.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    for (name, value) in decode(&bytes)? {
        store.assign(&name, value)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            what: "checkpoint".into(),
            detail: format!("need {n} bytes at offset {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
