//! Dense 64-bit float tensors with shape metadata.
//!
//! Row-major storage, ranks 0 (scalar), 1 (vector) and 2 (matrix). Tensors
//! are immutable once they enter a tape; construction helpers mutate only
//! local buffers.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                node: None,
                detail: format!("shape {shape:?} implies {numel} entries, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "Tensor::from_rows",
                    node: None,
                    detail: format!("ragged rows: expected {c} columns, got {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
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

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Diagonal matrix with `v` on the diagonal.
    pub fn diag_embed(v: &[f64]) -> Self {
        let n = v.len();
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = v[i];
        }
        t
    }

    /// 0/1 mask that is 1 on and below the diagonal.
    pub fn lower_triangle_mask(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                t.data[i * n + j] = 1.0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Shape {
                op: "as_scalar",
                node: None,
                detail: format!("expected scalar, got shape {:?}", self.shape),
            })
        }
    }

    pub fn rows(&self) -> usize {
        match self.rank() {
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.rank()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.rank()),
        }
    }

    #[inline]
    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Matrix transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose requires a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Plain matrix product; shapes must already agree.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2);
        assert_eq!(rhs.rank(), 2);
        assert_eq!(self.shape[1], rhs.shape[0], "matmul inner dims");
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[p * m..(p + 1) * m];
                let dst = &mut out.data[i * m..(i + 1) * m];
                for j in 0..m {
                    dst[j] += a * row[j];
                }
            }
        }
        out
    }

    pub fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "zip shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Tensor {
        self.zip(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds `rhs` into `self` elementwise.
    pub fn add_assign(&mut self, rhs: &Tensor) {
        assert_eq!(self.shape, rhs.shape, "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
    }

    /// Column sums of a matrix: [n, d] -> [d].
    pub fn sum_axis0(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (n, d) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += self.data[i * d + j];
            }
        }
        Tensor::vector(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }
}

/// Symmetrised copy 0.5 * (a + a^T) of a square matrix.
pub(crate) fn symmetrize(a: &Tensor) -> Tensor {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetrize requires a square matrix");
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set2(i, j, 0.5 * (a.get2(i, j) + a.get2(j, i)));
        }
    }
    out
}

/// Unblocked Cholesky of the symmetrised input; returns the lower factor.
pub(crate) fn cholesky_raw(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "cholesky",
            node: None,
            detail: format!("expected square matrix, got {:?}", a.shape()),
        });
    }
    let s = symmetrize(a);
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = s.get2(j, j);
        for k in 0..j {
            let v = l.get2(j, k);
            d -= v * v;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::CholeskyFailed { pivot: j });
        }
        let dj = d.sqrt();
        l.set2(j, j, dj);
        for i in (j + 1)..n {
            let mut v = s.get2(i, j);
            for k in 0..j {
                v -= l.get2(i, k) * l.get2(j, k);
            }
            l.set2(i, j, v / dj);
        }
    }
    Ok(l)
}

/// Solves `T x = b` column by column for lower-triangular `T`.
pub(crate) fn solve_lower_raw(t: &Tensor, b: &Tensor) -> Tensor {
    let n = t.rows();
    assert_eq!(t.cols(), n);
    assert_eq!(b.rows(), n, "solve_lower rhs rows");
    let m = b.cols();
    let mut x = b.clone();
    for j in 0..m {
        for i in 0..n {
            let mut v = x.get2(i, j);
            for k in 0..i {
                v -= t.get2(i, k) * x.get2(k, j);
            }
            x.set2(i, j, v / t.get2(i, i));
        }
    }
    x
}

/// Solves `T x = b` column by column for upper-triangular `T`.
pub(crate) fn solve_upper_raw(t: &Tensor, b: &Tensor) -> Tensor {
    let n = t.rows();
    assert_eq!(t.cols(), n);
    assert_eq!(b.rows(), n, "solve_upper rhs rows");
    let m = b.cols();
    let mut x = b.clone();
    for j in 0..m {
        for i in (0..n).rev() {
            let mut v = x.get2(i, j);
            for k in (i + 1)..n {
                v -= t.get2(i, k) * x.get2(k, j);
            }
            x.set2(i, j, v / t.get2(i, i));
        }
    }
    x
}

/// Keeps the lower triangle and halves the diagonal; zeroes the rest.
pub(crate) fn phi_lower(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            out.set2(i, j, a.get2(i, j));
        }
        out.set2(i, i, 0.5 * a.get2(i, i));
    }
    out
}
