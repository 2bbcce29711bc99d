//! Compressed-row sparse matrices built from coordinate triples.

use rayon::prelude::*;

use crate::error::{AorError, Result};
use crate::table::fmt_f64;

/// Row count above which matrix-vector products are split across threads.
const PAR_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> CsrMatrix {
        CsrMatrix {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triples. Duplicate coordinates are
    /// summed; column indices within each row end up sorted.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<CsrMatrix> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(AorError::Dimension(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(AorError::Validation(format!("non-finite entry at ({r}, {c})")));
            }
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        // Counting sort by row keeps the input order within each row.
        let mut next = counts.clone();
        let mut cols_tmp = vec![0usize; triplets.len()];
        let mut vals_tmp = vec![0f64; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols_tmp[slot] = c;
            vals_tmp[slot] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..rows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            // Stable sort so duplicates are summed in input order.
            order.sort_by_key(|&i| cols_tmp[i]);
            for &i in &order {
                let c = cols_tmp[i];
                if col_idx.len() > row_ptr[r] && col_idx[col_idx.len() - 1] == c {
                    *values.last_mut().unwrap() += vals_tmp[i];
                } else {
                    col_idx.push(c);
                    values.push(vals_tmp[i]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[lo..hi].binary_search(&c) {
            Ok(i) => self.values[lo + i],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += self.values[i] * x[self.col_idx[i]];
        }
        acc
    }

    /// `y = self · x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "mul_vec: x has wrong length");
        assert_eq!(y.len(), self.rows, "mul_vec: y has wrong length");
        if self.rows >= PAR_ROWS {
            y.par_iter_mut()
                .enumerate()
                .for_each(|(r, out)| *out = self.row_dot(r, x));
        } else {
            for (r, out) in y.iter_mut().enumerate() {
                *out = self.row_dot(r, x);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(AorError::Dimension(format!(
                "vector of length {} against matrix with {} columns",
                x.len(),
                self.cols
            )));
        }
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        Ok(y)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0f64; self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let slot = next[c];
                col_idx[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    /// Sparse product `self · rhs` using a dense accumulator per output row.
    pub fn matmul(&self, rhs: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != rhs.rows {
            return Err(AorError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .into_par_iter()
            .map_init(
                || (vec![0f64; rhs.cols], vec![false; rhs.cols], Vec::new()),
                |(acc, used, touched), r| {
                    touched.clear();
                    for (k, a) in self.row(r) {
                        for (c, b) in rhs.row(k) {
                            if !used[c] {
                                used[c] = true;
                                touched.push(c);
                            }
                            acc[c] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    let mut cols = Vec::with_capacity(touched.len());
                    let mut vals = Vec::with_capacity(touched.len());
                    for &c in touched.iter() {
                        cols.push(c);
                        vals.push(acc[c]);
                        acc[c] = 0.0;
                        used[c] = false;
                    }
                    (cols, vals)
                },
            )
            .collect();
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(|(c, _)| c.len()).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (c, v) in rows {
            col_idx.extend(c);
            values.extend(v);
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix {
            rows: self.rows,
            cols: rhs.cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Sum of squares of each column: the diagonal of `selfᵀ·self`.
    pub fn column_sq_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            out[*c] += v * v;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }

    /// Coordinate text: a `rows cols nnz` label line, the three counts, then
    /// one `row,col,value` line per stored entry in row-major order.
    pub fn to_coo_text(&self) -> String {
        let mut s = String::with_capacity(32 * self.nnz() + 64);
        s.push_str("rows cols nnz\n");
        s.push_str(&format!("{} {} {}\n", self.rows, self.cols, self.nnz()));
        for (r, c, v) in self.triplets() {
            s.push_str(&format!("{r},{c},{}\n", fmt_f64(v)));
        }
        s
    }

    pub fn from_coo_text(text: &str, source_name: &str) -> Result<CsrMatrix> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| AorError::parse(source_name, line + 1, msg);
        match lines.next() {
            Some((_, l)) if l.split_whitespace().collect::<Vec<_>>() == ["rows", "cols", "nnz"] => {}
            _ => return Err(bad(0, "expected `rows cols nnz` header")),
        }
        let (i, dims) = lines.next().ok_or_else(|| bad(1, "missing dimension line"))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(i, &e.to_string()))?;
        if dims.len() != 3 {
            return Err(bad(i, "dimension line needs three integers"));
        }
        let mut triplets = Vec::with_capacity(dims[2]);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad(i, "expected row,col,value"));
            }
            let r = f[0].parse::<usize>().map_err(|e| bad(i, &e.to_string()))?;
            let c = f[1].parse::<usize>().map_err(|e| bad(i, &e.to_string()))?;
            let v = f[2].parse::<f64>().map_err(|e| bad(i, &e.to_string()))?;
            triplets.push((r, c, v));
        }
        if triplets.len() != dims[2] {
            return Err(AorError::parse(
                source_name,
                2,
                format!("header declares {} entries, found {}", dims[2], triplets.len()),
            ));
        }
        CsrMatrix::from_triplets(dims[0], dims[1], &triplets)
    }
}
