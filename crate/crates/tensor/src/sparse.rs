//! Constant sparse operators applied from the left, `Y = A X`.
//!
//! Graph shifts, cluster pooling and block-diagonal batching all reduce to
//! this one shape of product, so the tape treats `A` as a constant and only
//! differentiates through `X`.

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed;
    /// explicit zeros are kept.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, T)>,
    ) -> Result<Self, TensorError> {
        let mut per_row: Vec<Vec<(usize, T)>> = vec![Vec::new(); rows];
        for (r, c, v) in triplets {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "csr",
                    index: r,
                    len: rows,
                });
            }
            if c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "csr",
                    index: c,
                    len: cols,
                });
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut entries in per_row {
            entries.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in entries {
                if last == Some(c) {
                    let tail = values.len() - 1;
                    values[tail] = values[tail] + v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Dense row-major `rows x cols` matrix to CSR, keeping every entry.
    pub fn from_dense(rows: usize, cols: usize, dense: &[T]) -> Self {
        assert_eq!(dense.len(), rows * cols, "dense length");
        let indptr = (0..=rows).map(|r| r * cols).collect();
        let indices = (0..rows).flat_map(|_| 0..cols).collect();
        Self {
            rows,
            cols,
            indptr,
            indices,
            values: dense.to_vec(),
        }
    }

    /// Block-diagonal stacking of `blocks` in order.
    pub fn block_diag(blocks: &[&Csr<T>]) -> Self {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let cols = blocks.iter().map(|b| b.cols).sum();
        let nnz = blocks.iter().map(|b| b.values.len()).sum();
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        let mut col_offset = 0;
        for b in blocks {
            for r in 0..b.rows {
                for p in b.indptr[r]..b.indptr[r + 1] {
                    indices.push(b.indices[p] + col_offset);
                    values.push(b.values[p]);
                }
                indptr.push(indices.len());
            }
            col_offset += b.cols;
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |p| (self.indices[p], self.values[p]))
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] = out[r * self.cols + c] + v;
            }
        }
        out
    }

    /// `A X` for dense row-major `X` with `width` columns.
    pub fn mul_dense(&self, x: &[T], width: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols * width);
        let mut out = vec![T::zero(); self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let src = &x[self.indices[p] * width..(self.indices[p] + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + v * s;
                }
            }
        }
        out
    }

    /// `Aᵀ G` for dense row-major `G` with `width` columns.
    pub fn transpose_mul_dense(&self, g: &[T], width: usize) -> Vec<T> {
        debug_assert_eq!(g.len(), self.rows * width);
        let mut out = vec![T::zero(); self.cols * width];
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let c = self.indices[p];
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + v * s;
                }
            }
        }
        out
    }
}
