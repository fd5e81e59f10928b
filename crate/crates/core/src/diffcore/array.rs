//! Dense row-major f64 arrays and the hot-loop kernels built on them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};

/// Row-major n-dimensional array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "NdArray::from_vec",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows / columns, treating 1-d arrays as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op })
        }
    }

    /// [rows, cols] transposed copy.
    pub fn transposed_2d(&self) -> NdArray {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let src = &self.data[i * n..(i + 1) * n];
            for (j, &v) in src.iter().enumerate() {
                out[j * m + i] = v;
            }
        }
        NdArray {
            shape: vec![n, m],
            data: out,
        }
    }
}

/// C += or = A(m×k) · B(k×n), ikj order so the inner loop is contiguous.
pub fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ik * bv;
            }
        }
    }
}

pub fn matmul(a: &NdArray, b: &NdArray, op: &'static str) -> Result<NdArray> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = NdArray::zeros(&[m, n]);
    matmul_into(out.data_mut(), a.data(), b.data(), m, k, n);
    Ok(out)
}

/// Accumulate A^T · B into `c` (k×n), where A is m×k and B is m×n.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ik * bv;
            }
        }
    }
}

/// Accumulate A · B^T into `c` (m×k), where A is m×n and B is k×n.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc0 = 0.0;
            let mut acc1 = 0.0;
            let mut chunks_a = a_row.chunks_exact(2);
            let mut chunks_b = b_row.chunks_exact(2);
            for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
                acc0 += ca[0] * cb[0];
                acc1 += ca[1] * cb[1];
            }
            for (&av, &bv) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
                acc0 += av * bv;
            }
            *cv += acc0 + acc1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_size() {
        assert!(NdArray::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(NdArray::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = NdArray::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = NdArray::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b, "matmul").unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = NdArray::zeros(&[2, 3]);
        let b = NdArray::zeros(&[2, 2]);
        let err = matmul(&a, &b, "matmul").unwrap_err();
        match err {
            CoreError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn transposed_matmul_variants_agree() {
        let mut rng = crate::rng::Rng::new(5);
        let (m, k, n) = (4, 5, 3);
        let a = NdArray::from_vec(vec![m, k], rng.uniform_vec(m * k, -1.0, 1.0)).unwrap();
        let b = NdArray::from_vec(vec![k, n], rng.uniform_vec(k * n, -1.0, 1.0)).unwrap();

        // A^T·B through the fused kernel vs explicit transpose.
        let mut via_tn = vec![0.0; k * n];
        matmul_tn_acc(&mut via_tn, a.data(), b.data(), m, k, n);
        let direct = matmul(&a.transposed_2d(), &b, "matmul").unwrap();
        for (x, y) in via_tn.iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        // A·(B^T)^T == A·B through the nt kernel.
        let bt = b.transposed_2d();
        let mut via_nt = vec![0.0; m * n];
        matmul_nt_acc(&mut via_nt, a.data(), bt.data(), m, k, n);
        let plain = matmul(&a, &b, "matmul").unwrap();
        for (x, y) in via_nt.iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
