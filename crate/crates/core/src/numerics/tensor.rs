//! Dense row-major `f64` tensors and the handful of BLAS-like kernels the
//! rest of the crate is built on.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense row-major array. Compute precision is always `f64`; storage
/// containers narrow to `f32` on the way out.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of the tensor viewed as a matrix: a 1-D tensor is a single row,
    /// higher ranks collapse everything but the innermost dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// View as `[rows, cols]`.
    pub fn as_matrix(self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self {
            shape: vec![r, c],
            data: self.data,
        }
    }

    pub fn flatten(&self) -> Self {
        Self {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_inplace(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(shape_err(format!(
                "axpy: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum over rows, giving a vector of length `cols`.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    /// Broadcast-add a row vector to every row.
    pub fn add_row(&mut self, row: &[f64]) -> Result<()> {
        let c = self.cols();
        if row.len() != c {
            return Err(shape_err(format!("add_row: {} vs {c}", row.len())));
        }
        for r in self.data.chunks_exact_mut(c) {
            for (a, b) in r.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
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

    /// Concatenate along the innermost dimension (row-wise join).
    pub fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map(|t| t.rows()).unwrap_or(0);
        if parts.iter().any(|t| t.rows() != rows) {
            return Err(shape_err("hcat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Stack equally sized rows into a matrix.
    pub fn stack_rows(rows: &[&[f64]]) -> Result<Tensor> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("stack_rows: empty or ragged"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Columns `[start, start+len)` of a row-major matrix.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if start + len > c || len == 0 {
            return Err(shape_err(format!("col_slice {start}+{len} of {c}")));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::new(vec![rows, len], data)
    }
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    N,
    T,
}

/// `out = alpha * op(a) op(b) + beta * out` over row-major 2-D views.
fn gemm(alpha: f64, a: &Tensor, ta: Op, b: &Tensor, tb: Op, beta: f64, out: &mut Tensor) -> Result<()> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta == Op::N { (ar, ac) } else { (ac, ar) };
    let (k2, n) = if tb == Op::N { (br, bc) } else { (bc, br) };
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dims: {:?}{} x {:?}{}",
            a.shape(),
            if ta == Op::T { "ᵀ" } else { "" },
            b.shape(),
            if tb == Op::T { "ᵀ" } else { "" }
        )));
    }
    if out.rows() != m || out.cols() != n {
        return Err(shape_err(format!(
            "matmul output {:?} but product is {m}x{n}",
            out.shape()
        )));
    }
    // Row-major strides; transposition just swaps them.
    let (rsa, csa) = if ta == Op::N { (ac as isize, 1) } else { (1, ac as isize) };
    let (rsb, csb) = if tb == Op::N { (bc as isize, 1) } else { (1, bc as isize) };
    // SAFETY: the dimension checks above guarantee every strided access made
    // by dgemm stays inside the three buffers, and `out` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm(1.0, a, Op::N, b, Op::N, 0.0, &mut out)?;
    Ok(out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[a.rows(), b.rows()]);
    gemm(1.0, a, Op::N, b, Op::T, 0.0, &mut out)?;
    Ok(out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[a.cols(), b.cols()]);
    gemm(1.0, a, Op::T, b, Op::N, 0.0, &mut out)?;
    Ok(out)
}

/// `out += alpha · a · bᵀ`
pub fn matmul_nt_acc(alpha: f64, a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    gemm(alpha, a, Op::N, b, Op::T, 1.0, out)
}

/// `out += alpha · a · b`
pub fn matmul_acc(alpha: f64, a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    gemm(alpha, a, Op::N, b, Op::N, 1.0, out)
}

/// `out += alpha · aᵀ · b`
pub fn matmul_tn_acc(alpha: f64, a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    gemm(alpha, a, Op::T, b, Op::N, 1.0, out)
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err(format!("dot: {} vs {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

pub fn norm(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let d = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine of a zero-norm vector".into()));
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn products_agree_with_triple_loop() {
        let a = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        let want = naive(&a, &b);
        assert!(matmul(&a, &b).unwrap().sub(&want).unwrap().max_abs() < 1e-14);
        let bt = b.transpose();
        assert!(matmul_nt(&a, &bt).unwrap().sub(&want).unwrap().max_abs() < 1e-14);
        let at = a.transpose();
        assert!(matmul_tn(&at, &b).unwrap().sub(&want).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn inner_dimension_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn vec_op_examples() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&u, &[0.0; 3]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
