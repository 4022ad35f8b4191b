//! Per-item feature matrices and their binary file format.
//!
//! File layout, integers little-endian: `b"DSFT"`, version `u32`, `n: u64`,
//! `d_feat: u64`, then `n` newline-terminated UTF-8 item ids (the row
//! order), then `n × d_feat` `f64` values row by row.

use std::fs;
use std::path::Path;

use crate::data::ItemVocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSFT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    Loaded,
    ZeroFilled,
}

/// `n × d_feat` item features in vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub provenance: Vec<RowSource>,
}

impl FeatureMatrix {
    pub fn loaded(values: Tensor) -> Self {
        let n = values.rows();
        Self {
            values,
            provenance: vec![RowSource::Loaded; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn zero_filled(&self) -> usize {
        self.provenance.iter().filter(|&&p| p == RowSource::ZeroFilled).count()
    }
}

pub fn write_features(path: &Path, ids: &[String], values: &Tensor) -> Result<()> {
    let (n, d) = values.dims2();
    if ids.len() != n {
        return Err(Error::shape("write_features", &[ids.len()], values.shape()));
    }
    let mut out = Vec::with_capacity(24 + n * (d * 8 + 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for id in ids {
        if id.contains('\n') {
            return Err(Error::invalid(format!("item id {id:?} contains a newline")));
        }
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    for &v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let short = || Error::Format(format!("{}: truncated feature file", path.display()));
    if buf.len() < 24 || &buf[..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic, expected DSFT", path.display())));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")) as usize;
    let mut pos = 24;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let end = buf[pos..].iter().position(|&b| b == b'\n').ok_or_else(short)? + pos;
        let id =
            std::str::from_utf8(&buf[pos..end]).map_err(|e| Error::Format(format!("item id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
        pos = end + 1;
    }
    let payload = &buf[pos..];
    if payload.len() != n * d * 8 {
        return Err(short());
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((ids, Tensor::matrix(n, d, data)?))
}

/// Reorders feature rows into vocabulary order. Items without a row are
/// zero-filled; rows for unknown items are ignored.
pub fn align_features(vocab: &ItemVocab, ids: &[String], values: &Tensor) -> FeatureMatrix {
    let d = values.cols();
    let mut out = Tensor::zeros(&[vocab.len(), d]);
    let mut provenance = vec![RowSource::ZeroFilled; vocab.len()];
    for (row, id) in ids.iter().enumerate() {
        if let Some(i) = vocab.get(id) {
            out.row_mut(i).copy_from_slice(values.row(row));
            provenance[i] = RowSource::Loaded;
        }
    }
    let missing = provenance.iter().filter(|&&p| p == RowSource::ZeroFilled).count();
    if missing > 0 {
        log::warn!("{missing} of {} items have no feature row; zero-filled", vocab.len());
    }
    FeatureMatrix {
        values: out,
        provenance,
    }
}
