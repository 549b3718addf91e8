use std::fmt;

use crate::error::{Result, SencaError};

/// Dense row-major tensor of `f64` values.
///
/// Most of the pipeline works with rank-2 matrices. A rank-1 tensor of
/// length `n` is treated as a `1 × n` row wherever a matrix is expected.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(SencaError::Parameter(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SencaError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(SencaError::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` view of a rank-1 or rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(SencaError::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(SencaError::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::Normal,
            &other.data,
            Layout::Normal,
            &mut out,
            false,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `out (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// Buffers are row-major in their stored orientation; `Transposed` means the
/// stored matrix is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    out: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the
    // three slices, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_by_column() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(
            a.matmul(&b),
            Err(SencaError::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn transposed_layouts_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let expected = a.transpose().matmul(&b).unwrap();
        let mut out = vec![0.0; 8];
        gemm(2, 3, 4, a.data(), Layout::Transposed, b.data(), Layout::Normal, &mut out, false);
        assert!(expected
            .data()
            .iter()
            .zip(&out)
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
