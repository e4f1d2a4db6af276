use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Scalar;

/// Compressed sparse row matrix with `f64` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Entries within a row keep
    /// their input order; callers sort when order matters.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in triplets {
            assert!(r < rows && c < cols, "triplet out of range");
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut fill = counts;
        let mut indices = vec![0usize; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let at = fill[r];
            indices[at] = c;
            values[at] = v;
            fill[r] += 1;
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

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out = self · x` for a dense `cols × width` matrix `x`.
    pub fn apply<F: Scalar>(&self, x: &[F], width: usize, out: &mut [F]) {
        debug_assert_eq!(x.len(), self.cols * width);
        debug_assert_eq!(out.len(), self.rows * width);
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            dst.iter_mut().for_each(|v| *v = F::zero());
            for (c, w) in self.row_entries(r) {
                let w = F::of(w);
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
    }

    /// `out += selfᵀ · g` for a dense `rows × width` matrix `g`.
    pub fn apply_transpose_add<F: Scalar>(&self, g: &[F], width: usize, out: &mut [F]) {
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, w) in self.row_entries(r) {
                let w = F::of(w);
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
    }
}
