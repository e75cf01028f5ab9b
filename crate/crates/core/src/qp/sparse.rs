//! Compressed sparse column matrices, sized for the QP solver's needs:
//! construction from triplets, products with vectors on either side,
//! diagonal scaling, and a plain-text triplet dump for offline debugging.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sparse matrix in compressed sparse column form. Row indices are strictly
/// increasing within each column and duplicate entries are merged on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from (row, col, value) triplets. Duplicates are summed;
    /// explicit zeros are kept (they reserve a slot for later value updates).
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::argument(format!(
                    "triplet ({r}, {c}) outside a {nrows}x{ncols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::argument(format!("non-finite entry at ({r}, {c})")));
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].1, triplets[k].0));

        let mut counts = vec![0usize; ncols];
        let mut merged_rows = Vec::with_capacity(triplets.len());
        let mut merged_vals = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            if last == Some((c, r)) {
                *merged_vals.last_mut().unwrap() += v;
            } else {
                counts[c] += 1;
                merged_rows.push(r);
                merged_vals.push(v);
                last = Some((c, r));
            }
        }
        let mut ptr = vec![0usize; ncols + 1];
        for c in 0..ncols {
            ptr[c + 1] = ptr[c] + counts[c];
        }
        Ok(CscMatrix {
            nrows,
            ncols,
            col_ptr: ptr,
            row_idx: merged_rows,
            values: merged_vals,
        })
    }

    /// Build from raw CSC arrays, validating the structure.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != ncols + 1 || col_ptr[0] != 0 {
            return Err(Error::argument("malformed column pointers"));
        }
        if *col_ptr.last().unwrap() != row_idx.len() || row_idx.len() != values.len() {
            return Err(Error::argument("column pointers disagree with entry count"));
        }
        for c in 0..ncols {
            if col_ptr[c] > col_ptr[c + 1] {
                return Err(Error::argument("column pointers must be non-decreasing"));
            }
            let rows = &row_idx[col_ptr[c]..col_ptr[c + 1]];
            if rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::argument(format!(
                    "row indices in column {c} must be strictly increasing"
                )));
            }
            if rows.last().is_some_and(|&r| r >= nrows) {
                return Err(Error::argument(format!("row index out of range in column {c}")));
            }
        }
        Ok(CscMatrix { nrows, ncols, col_ptr, row_idx, values })
    }

    pub fn from_dense(a: &Array2<f64>) -> Self {
        let (nrows, ncols) = a.dim();
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for c in 0..ncols {
            for r in 0..nrows {
                let v = a[[r, c]];
                if v != 0.0 {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        CscMatrix { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.nrows, self.ncols));
        for c in 0..self.ncols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                a[[self.row_idx[k], c]] += self.values[k];
            }
        }
        a
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the numeric values (pattern is fixed).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Overwrite the numeric values, keeping the sparsity pattern.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::argument(format!(
                "expected {} values for this pattern, got {}",
                self.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("non-finite matrix value"));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// y += alpha * A x
    pub fn axpy(&self, x: &[f64], y: &mut [f64], alpha: f64) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
    }

    /// y += alpha * Aᵀ x
    pub fn axpy_transpose(&self, x: &[f64], y: &mut [f64], alpha: f64) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.axpy(x, &mut y, 1.0);
        y
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.axpy_transpose(x, &mut y, 1.0);
        y
    }

    /// Multiply every entry by a scalar.
    pub fn scale_all(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// A ← diag(r) · A · diag(c); pass `None` to skip a side.
    pub fn scale(&mut self, row_scale: Option<&[f64]>, col_scale: Option<&[f64]>) {
        for c in 0..self.ncols {
            let cs = col_scale.map_or(1.0, |s| s[c]);
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let rs = row_scale.map_or(1.0, |s| s[self.row_idx[k]]);
                self.values[k] *= rs * cs;
            }
        }
    }

    /// Infinity norm of each column.
    pub fn col_inf_norms(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.ncols);
        for c in 0..self.ncols {
            let mut m = 0.0_f64;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                m = m.max(self.values[k].abs());
            }
            out[c] = m;
        }
    }

    /// Update `out[r] = max(out[r], |A[r, c]|)` over all entries — callers
    /// zero `out` first to get row infinity norms.
    pub fn accumulate_row_inf_norms(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.nrows);
        for (k, &r) in self.row_idx.iter().enumerate() {
            out[r] = out[r].max(self.values[k].abs());
        }
    }

    /// Check symmetry of a square matrix within `tol` (used to validate QP
    /// cost matrices).
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        // Gather entries of the transpose and compare; O(nnz log nnz).
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                entries.push((self.row_idx[k], c, self.values[k]));
            }
        }
        let mut transposed: Vec<(usize, usize, f64)> =
            entries.iter().map(|&(r, c, v)| (c, r, v)).collect();
        entries.sort_by_key(|&(r, c, _)| (c, r));
        transposed.sort_by_key(|&(r, c, _)| (c, r));
        let mut i = 0;
        let mut j = 0;
        while i < entries.len() || j < transposed.len() {
            let a = entries.get(i);
            let b = transposed.get(j);
            match (a, b) {
                (Some(&(ra, ca, va)), Some(&(rb, cb, vb))) if (ca, ra) == (cb, rb) => {
                    if (va - vb).abs() > tol {
                        return false;
                    }
                    i += 1;
                    j += 1;
                }
                (Some(&(ra, ca, va)), Some(&(rb, cb, _))) if (ca, ra) < (cb, rb) => {
                    if va.abs() > tol {
                        return false;
                    }
                    i += 1;
                }
                (Some(_), Some(&(_, _, vb))) => {
                    if vb.abs() > tol {
                        return false;
                    }
                    j += 1;
                }
                (Some(&(_, _, va)), None) => {
                    if va.abs() > tol {
                        return false;
                    }
                    i += 1;
                }
                (None, Some(&(_, _, vb))) => {
                    if vb.abs() > tol {
                        return false;
                    }
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        true
    }

    /// Extract the upper triangle (including the diagonal) of a square
    /// matrix; the LDL factorization consumes this form.
    pub fn upper_triangle(&self) -> CscMatrix {
        let mut col_ptr = vec![0usize; self.ncols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for c in 0..self.ncols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                if self.row_idx[k] <= c {
                    row_idx.push(self.row_idx[k]);
                    values.push(self.values[k]);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        CscMatrix { nrows: self.nrows, ncols: self.ncols, col_ptr, row_idx, values }
    }

    /// Plain-text triplet dump (`row col value` per line) for offline
    /// debugging of assembled problems.
    pub fn dump_triplets(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for c in 0..self.ncols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                writeln!(w, "{} {} {:.17e}", self.row_idx[k], c, self.values[k])?;
            }
        }
        Ok(())
    }
}
