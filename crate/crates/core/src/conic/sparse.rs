use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Compressed sparse column storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    /// Duplicates are summed, exact zeros dropped, rows sorted per column.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        let mut cols = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *nzval.last_mut().expect("entry exists") += v;
            } else {
                rowval.push(r);
                nzval.push(v);
                cols.push(c);
                last = Some((r, c));
            }
        }
        let mut keep_r = Vec::with_capacity(rowval.len());
        let mut keep_v = Vec::with_capacity(rowval.len());
        for ((r, v), c) in rowval.into_iter().zip(nzval).zip(cols) {
            if v != 0.0 {
                keep_r.push(r);
                keep_v.push(v);
                colptr[c + 1] += 1;
            }
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowval: keep_r,
            nzval: keep_v,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if m[(r, c)] != 0.0 {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), t)
    }

    /// Upper triangle of a symmetric dense matrix.
    pub fn upper_from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..=c.min(m.nrows().saturating_sub(1)) {
                if m[(r, c)] != 0.0 {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), t)
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols)
            .flat_map(move |c| (self.colptr[c]..self.colptr[c + 1]).map(move |k| (self.rowval[k], c, self.nzval[k])))
    }

    pub fn has_lower_entries(&self) -> bool {
        self.entries().any(|(r, c, _)| r > c)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.entries() {
            m[(r, c)] += v;
        }
        m
    }

    /// Full symmetric matrix from upper-triangular storage.
    pub fn symmetric_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.entries() {
            m[(r, c)] += v;
            if r != c {
                m[(c, r)] += v;
            }
        }
        m
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.colptr[c]..self.colptr[c + 1] {
                out[self.rowval[k]] += self.nzval[k] * xc;
            }
        }
        out
    }

    pub fn tmul(&self, y: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|c| {
                (self.colptr[c]..self.colptr[c + 1])
                    .map(|k| self.nzval[k] * y[self.rowval[k]])
                    .sum()
            })
            .collect()
    }

    /// Product with the symmetric matrix whose upper triangle is stored.
    pub fn symmetric_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        for (r, c, v) in self.entries() {
            out[r] += v * x[c];
            if r != c {
                out[c] += v * x[r];
            }
        }
        out
    }
}
