//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SOTCKPT1"
//! config_hash  u64
//! count        u32      number of records, sorted by path
//! record × count:
//!   path_len   u32
//!   path       path_len bytes, UTF-8
//!   kind       u8       0 = trainable, 1 = buffer
//!   ndim       u32
//!   dims       u32 × ndim
//!   values     f32 × product(dims), row-major
//! ```
//!
//! Values are narrowed to `f32` on save, so `load(save(x))` re-saves to
//! identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SOTCKPT1";

fn ck(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode(store: &ParamStore, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (path, p) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(if p.trainable { 0 } else { 1 });
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, u64)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(ck("bad magic"));
    }
    let hash = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32()? as usize;
        let path = std::str::from_utf8(c.take(len)?).map_err(|_| ck(format!("path at byte {at} is not UTF-8")))?;
        let kind = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| ck("record too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ck(format!("record `{path}` at byte {at}: {e}")))?;
        match kind {
            0 => store.insert_trainable(path, t)?,
            1 => store.insert_buffer(path, t)?,
            k => return Err(ck(format!("record `{path}` has unknown kind {k}"))),
        }
    }
    if c.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((store, hash))
}

pub fn save(path: &Path, store: &ParamStore, config_hash: u64) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    f.write_all(&encode(store, config_hash)).map_err(|e| ck(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(ParamStore, u64)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| ck(format!("{}: {e}", path.display())))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_trailing_rejected() {
        let mut s = ParamStore::new();
        s.insert_trainable("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let bytes = encode(&s, 7);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let (back, hash) = decode(&bytes).unwrap();
        assert_eq!(hash, 7);
        assert_eq!(back, s);
    }
}
