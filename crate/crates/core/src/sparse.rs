//! Compressed sparse row matrices used as constant operators on the tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!("triplet ({r}, {c}) outside {rows}x{cols}")));
            }
        }
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("nonempty") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `r` as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.data_mut()[r * self.cols + c] += v;
            }
        }
        out
    }

    /// `self · x` for a dense `cols × k` matrix.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        let (xr, k) = x.dims2();
        if xr != self.cols {
            return Err(Error::shape("spmm", &[self.rows, self.cols], x.shape()));
        }
        let mut out = vec![0.0; self.rows * k];
        for r in 0..self.rows {
            let dst = &mut out[r * k..(r + 1) * k];
            for (c, w) in self.row(r) {
                for (d, s) in dst.iter_mut().zip(x.row(c)) {
                    *d += w * s;
                }
            }
        }
        Tensor::matrix(self.rows, k, out)
    }

    /// `selfᵀ · g` for a dense `rows × k` matrix.
    pub fn transpose_matmul_dense(&self, g: &Tensor) -> Tensor {
        let k = g.cols();
        let mut out = vec![0.0; self.cols * k];
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, w) in self.row(r) {
                let dst = &mut out[c * k..(c + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Tensor::matrix(self.cols, k, out).expect("consistent dims")
    }
}
