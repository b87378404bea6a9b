//! Dense row-major `f64` tensors.
//!
//! Only the operations the rest of the crate needs: 2-D products (plain and
//! with either operand transposed), element-wise arithmetic and reductions.
//! Every product uses a fixed loop order so results are bit-reproducible.

use std::fmt;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting a length/shape mismatch or non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err("Tensor::new", expected, data.len()));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data).expect("finite literal")
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::new(vec![values.len()], values.to_vec()).expect("finite literal")
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// Raw mutable access. Callers writing non-finite values must report it
    /// through [`Tensor::check_finite`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.ndim() == 2 {
            Ok(())
        } else {
            Err(shape_err(op, "2-D", &self.shape))
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            for (j, v) in row.iter().enumerate() {
                out[j * m + i] = *v;
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("t_matmul")?;
        other.require_matrix("t_matmul")?;
        let (p, m) = (self.rows(), self.cols());
        let n = other.cols();
        if other.rows() != p {
            return Err(shape_err("t_matmul", [p, n], other.shape()));
        }
        let mut out = vec![0.0; m * n];
        for k in 0..p {
            let a_row = &self.data[k * m..(k + 1) * m];
            let b_row = &other.data[k * n..(k + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (x, &b) in o.iter_mut().zip(b_row) {
                    *x += a * b;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("t_matmul")?;
        Ok(t)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_t")?;
        other.require_matrix("matmul_t")?;
        let (m, k) = (self.rows(), self.cols());
        let n = other.rows();
        if other.cols() != k {
            return Err(shape_err("matmul_t", [n, k], other.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot_slices(a_row, b_row);
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("matmul_t")?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| v * alpha)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        self.check_finite("axpy")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        };
        t.check_finite(op)?;
        Ok(t)
    }

    /// Flat inner product over all elements.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err("dot", &self.shape, &other.shape));
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `start..end` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        self.require_matrix("columns")?;
        if start > end || end > self.cols() {
            return Err(shape_err("columns", format!("range within 0..{}", self.cols()), start..end));
        }
        let (m, n, w) = (self.rows(), self.cols(), end - start);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data,
        })
    }

    /// Appends a trailing column of ones: the homogeneous form `[x | 1]`.
    pub fn with_ones_column(&self) -> Result<Tensor> {
        self.require_matrix("with_ones_column")?;
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(m * (n + 1));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
            data.push(1.0);
        }
        Ok(Tensor {
            shape: vec![m, n + 1],
            data,
        })
    }

    /// Stacks equal-width matrices vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty { op: "vstack" })?;
        first.require_matrix("vstack")?;
        let n = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.ndim() != 2 || p.cols() != n {
                return Err(shape_err("vstack", ["_", &n.to_string()], p.shape()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, n],
            data,
        })
    }
}

#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product with a fixed `i-k-j` loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("matmul")?;
    b.require_matrix("matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    if b.rows() != k {
        return Err(shape_err("matmul", [k, n], b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (x, &bv) in o.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.check_finite("matmul")?;
    Ok(t)
}

pub fn frobenius_norm_sq(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn one_by_one_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let a = rng.normal(&[4, 3]);
        let b = rng.normal(&[3, 5]);
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive(&a, &b)) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = SeededRng::new(4);
        let a = rng.normal(&[6, 3]);
        let b = rng.normal(&[6, 4]);
        let c = rng.normal(&[5, 3]);
        let tn = a.t_matmul(&b).unwrap();
        let tn_ref = a.transpose().unwrap().matmul(&b).unwrap();
        let nt = a.matmul_t(&c).unwrap();
        let nt_ref = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-12);
        assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_result_is_reported() {
        let a = Tensor::from_rows(&[&[1e200]]);
        assert!(matches!(a.matmul(&a), Err(Error::NonFinite { .. })));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Tensor::zeros(&[3, 3]).frobenius_norm_sq(), 0.0);
        assert_eq!(Tensor::from_rows(&[&[3.0, 4.0]]).frobenius_norm_sq(), 25.0);
    }

    #[test]
    fn homogeneous_column() {
        let x = Tensor::from_rows(&[&[2.0], &[3.0]]);
        assert_eq!(x.with_ones_column().unwrap().data(), &[2.0, 1.0, 3.0, 1.0]);
    }
}
