//! Flat binary tensor archive.
//!
//! Layout, all integers little-endian:
//! `b"DSBR"`, version `u32`, record count `u32`, then per record:
//! name length `u32`, UTF-8 name, rank `u32`, dims as `u64` each,
//! payload as `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSBR";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected DSBR".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("record name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        records.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Writes every parameter of the store under its own name.
pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let records: Vec<(&str, &Tensor)> = store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    write(path, &records)
}

/// Loads values into an existing store; names and shapes must match.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<()> {
    for (name, tensor) in read(path)? {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint has unknown parameter `{name}`")))?;
        let p = store.get_mut(id);
        if p.value.shape() != tensor.shape() {
            return Err(Error::shape("load_params", p.value.shape(), tensor.shape()));
        }
        p.value = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let bytes = encode(&[("w", &t)]);
        assert_eq!(&bytes[0..4], b"DSBR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn roundtrip_and_truncation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::scalar(7.0);
        let bytes = encode(&[("E_id", &a), ("rho", &b)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, vec![("E_id".to_string(), a), ("rho".to_string(), b)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"XXXX").is_err());
    }
}
