use super::tensor::Tensor;
use crate::error::{Result, SencaError};

/// Compressed sparse row matrix used as a constant left factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                if c >= cols {
                    return Err(SencaError::Bounds(format!("column {c} of {cols}")));
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            rows: rows.len(),
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let cur = t.get(r, c);
                t.set(r, c, cur + v);
            }
        }
        t
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        let (xr, xc) = x.dims2();
        if xr != self.cols {
            return Err(SencaError::shape("sparse_matmul", &[self.rows, self.cols], x.shape()));
        }
        let mut out = Tensor::zeros(&[self.rows, xc]);
        for r in 0..self.rows {
            let orow = &mut out.data_mut()[r * xc..(r + 1) * xc];
            for (c, v) in self.row(r) {
                for (o, s) in orow.iter_mut().zip(x.row(c)) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `selfᵀ · g` into `out` (`cols × g.cols()`, row-major).
    pub(crate) fn transpose_matmul_into(&self, g: &Tensor, out: &mut [f64]) {
        let gc = g.cols();
        for r in 0..self.rows {
            let grow = g.row(r);
            for (c, v) in self.row(r) {
                for (o, s) in out[c * gc..(c + 1) * gc].iter_mut().zip(grow) {
                    *o += v * s;
                }
            }
        }
    }
}
