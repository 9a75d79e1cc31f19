//! Dense matrix and vector kernels.
//!
//! Row-major `f64` storage throughout. `vec`/`kron_reshape` use the
//! column-stacking convention, fixed so that `(Q2 ⊗ Q1) vec(T) = vec(Q1 T Q2ᵀ)`
//! holds exactly; the Kronecker-factored preconditioners depend on it.
//!
//! The eigendecomposition here is a cyclic Jacobi sweep: slow but robust and
//! dependency-free. It backs test oracles and is never on an update hot path.
//!
//! Everything in this module is a pure function of its inputs (random
//! sampling takes an explicit stream), so concurrent use is safe as long as
//! each thread owns its own stream.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};

/// A dense vector of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Creates a vector, rejecting NaN and infinite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "Vector::new" });
        }
        Ok(Vector { data })
    }

    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Vector { data: (0..n).map(f).collect() }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector { data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add length mismatch");
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub length mismatch");
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reinterprets the vector as an n-by-1 matrix.
    pub fn into_column(self) -> Matrix {
        let rows = self.data.len();
        Matrix { rows, cols: 1, data: self.data }
    }
}

/// A dense row-major matrix of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Creates a matrix from row-major data, rejecting NaN/Inf entries and
    /// length mismatches.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidData { expected: rows * cols, got: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "Matrix::new" });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix { rows: m, cols: n, data: out }
    }

    pub fn mul_vec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = self.row(i).iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
        }
        Vector { data: out }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Flattens a column vector back into `Vector` form.
    pub fn into_vector(self) -> Vector {
        assert_eq!(self.cols, 1, "into_vector: not a column");
        Vector { data: self.data }
    }
}

/// Maximum absolute entry; the matrix norm used to normalize preconditioner
/// update steps.
pub fn max_abs_norm(m: &Matrix) -> f64 {
    m.as_slice().iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Solves `U x = b` for upper-triangular `U` by back substitution.
///
/// ```
/// use psgd_core::matrix::{triangular_solve_upper, Matrix, Vector};
///
/// let u = Matrix::from_rows(&[&[2.0, 1.0], &[0.0, 4.0]]);
/// let b = Vector::new(vec![4.0, 8.0])?;
/// let x = triangular_solve_upper(&u, &b)?;
/// assert_eq!(x.as_slice(), &[1.0, 2.0]);
/// # Ok::<(), psgd_core::Error>(())
/// ```
pub fn triangular_solve_upper(u: &Matrix, b: &Vector) -> Result<Vector> {
    let n = u.rows();
    if u.cols() != n {
        return Err(Error::ShapeMismatch { context: format!("triangular solve on {}x{}", u.rows(), u.cols()) });
    }
    if b.len() != n {
        return Err(Error::ShapeMismatch { context: format!("rhs length {} for {}x{} system", b.len(), n, n) });
    }
    let mut x = b.as_slice().to_vec();
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc -= u.get(i, j) * x[j];
        }
        let d = u.get(i, i);
        if d == 0.0 {
            return Err(Error::SingularDiagonal { row: i });
        }
        x[i] = acc / d;
    }
    Ok(Vector { data: x })
}

/// Solves `Uᵀ x = b` for upper-triangular `U` by forward substitution.
pub fn triangular_solve_upper_transpose(u: &Matrix, b: &Vector) -> Result<Vector> {
    let n = u.rows();
    if u.cols() != n || b.len() != n {
        return Err(Error::ShapeMismatch { context: format!("transpose triangular solve on {}x{} with rhs {}", u.rows(), u.cols(), b.len()) });
    }
    let mut x = b.as_slice().to_vec();
    for i in 0..n {
        let mut acc = x[i];
        for j in 0..i {
            acc -= u.get(j, i) * x[j];
        }
        let d = u.get(i, i);
        if d == 0.0 {
            return Err(Error::SingularDiagonal { row: i });
        }
        x[i] = acc / d;
    }
    Ok(Vector { data: x })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns. Input must be symmetric within `1e-12` relative
/// asymmetry.
pub fn sym_eig(s: &Matrix) -> Result<(Vector, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::ShapeMismatch { context: format!("sym_eig on {}x{}", s.rows(), s.cols()) });
    }
    let scale = max_abs_norm(s);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if scale > 0.0 && asym > 1e-12 * scale {
        return Err(Error::NotSymmetric { max_asymmetry: asym / scale });
    }

    let mut a = s.clone();
    let mut v = Matrix::identity(n);
    let fro = s.frobenius_norm();
    let tol = 1e-14 * fro.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and q of `a`, columns of `v`.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let w = Vector::from_fn(n, |i| a.get(order[i], order[i]));
    let vecs = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((w, vecs))
}

/// Inverse principal square root of a symmetric positive-definite matrix:
/// returns `M` with `M·M = S⁻¹`.
pub fn inv_principal_sqrt(s: &Matrix) -> Result<Matrix> {
    let (w, v) = sym_eig(s)?;
    for &lam in w.as_slice() {
        if lam <= 0.0 {
            return Err(Error::NotPositiveDefinite { eigenvalue: lam });
        }
    }
    let n = s.rows();
    // V · diag(w^{-1/2}) · Vᵀ
    let mut scaled = v.clone();
    for j in 0..n {
        let f = 1.0 / w.as_slice()[j].sqrt();
        for i in 0..n {
            scaled.set(i, j, scaled.get(i, j) * f);
        }
    }
    Ok(scaled.matmul(&v.transpose()))
}

/// Principal square root of a symmetric positive-definite matrix.
pub fn principal_sqrt(s: &Matrix) -> Result<Matrix> {
    let (w, v) = sym_eig(s)?;
    for &lam in w.as_slice() {
        if lam < 0.0 {
            return Err(Error::NotPositiveDefinite { eigenvalue: lam });
        }
    }
    let n = s.rows();
    let mut scaled = v.clone();
    for j in 0..n {
        let f = w.as_slice()[j].sqrt();
        for i in 0..n {
            scaled.set(i, j, scaled.get(i, j) * f);
        }
    }
    Ok(scaled.matmul(&v.transpose()))
}

/// Column-stacking flatten: `vec(M)[j·rows + i] = M[i, j]`.
pub fn vec_mat(m: &Matrix) -> Vector {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out.push(m.get(i, j));
        }
    }
    Vector { data: out }
}

/// Inverse of [`vec_mat`]: reshapes a length `m·n` vector into an m-by-n
/// matrix under the column-stacking convention.
pub fn kron_reshape(v: &Vector, m: usize, n: usize) -> Result<Matrix> {
    if v.len() != m * n {
        return Err(Error::InvalidData { expected: m * n, got: v.len() });
    }
    Ok(Matrix::from_fn(m, n, |i, j| v.as_slice()[j * m + i]))
}

/// Dense Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |i, j| a.get(i / br, j / bc) * b.get(i % br, j % bc))
}

/// Dense linear solve with partial pivoting. Test/oracle helper.
pub fn solve_lu(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::ShapeMismatch { context: format!("solve_lu on {}x{} with rhs {}", a.rows(), a.cols(), b.len()) });
    }
    let mut m = a.clone();
    let mut x = b.as_slice().to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m.get(r, col).abs() > m.get(piv, col).abs() {
                piv = r;
            }
        }
        if m.get(piv, col) == 0.0 {
            return Err(Error::SingularDiagonal { row: col });
        }
        if piv != col {
            for j in 0..n {
                let t = m.get(col, j);
                m.set(col, j, m.get(piv, j));
                m.set(piv, j, t);
            }
            x.swap(col, piv);
        }
        let d = m.get(col, col);
        for r in col + 1..n {
            let f = m.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m.get(r, j) - f * m.get(col, j);
                m.set(r, j, v);
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc -= m.get(i, j) * x[j];
        }
        x[i] = acc / m.get(i, i);
    }
    Ok(Vector { data: x })
}

/// Random symmetric positive-definite matrix `A Aᵀ + n·I/10`; test helper.
pub fn random_spd(n: usize, stream: &mut crate::rng::SeedStream) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| stream.standard_normal());
    let mut s = a.matmul(&a.transpose()).scale(1.0 / n as f64);
    for i in 0..n {
        s.set(i, i, s.get(i, i) + 0.1);
    }
    s
}

/// Random symmetric matrix (not necessarily definite); test helper.
pub fn random_symmetric(n: usize, stream: &mut crate::rng::SeedStream) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| stream.standard_normal());
    a.add(&a.transpose()).scale(0.5)
}
