//! Dense row-major f64 arrays.
//!
//! Everything learned in this crate runs on these: they are deliberately
//! simple (shape + flat buffer) so the gradient tape can treat every value
//! uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        Self { shape, values }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// Build a rows x cols matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar array");
        self.values[0]
    }

    /// Rows of a 2-D array (a 1-D array counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            n => panic!("rows() on {n}-d array"),
        }
    }

    /// Columns of a 1-D or 2-D array.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            n => panic!("cols() on {n}-d array"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape changes element count");
        Self {
            shape,
            values: self.values.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }
}

/// C[m,n] = A[m,k] * B[k,n], row-major. The `ikj` loop order keeps the inner
/// loop contiguous in both B and C.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul inner dims: {k} vs {kb}");
    let mut out = vec![0.0; m * n];
    let av = a.values();
    let bv = b.values();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            for (c, &bpj) in crow.iter_mut().zip(brow.iter()) {
                *c += aip * bpj;
            }
        }
    }
    DenseArray::matrix(m, n, out)
}

/// C[m,n] = A[k,m]^T * B[k,n] without materializing the transpose.
pub fn matmul_tn(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_tn inner dims: {k} vs {kb}");
    let mut out = vec![0.0; m * n];
    let av = a.values();
    let bv = b.values();
    for p in 0..k {
        let arow = &av[p * m..(p + 1) * m];
        let brow = &bv[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bpj) in crow.iter_mut().zip(brow.iter()) {
                *c += api * bpj;
            }
        }
    }
    DenseArray::matrix(m, n, out)
}

/// C[m,n] = A[m,k] * B[n,k]^T without materializing the transpose.
pub fn matmul_nt(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_nt inner dims: {k} vs {kb}");
    let mut out = vec![0.0; m * n];
    let av = a.values();
    let bv = b.values();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bv[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    DenseArray::matrix(m, n, out)
}
