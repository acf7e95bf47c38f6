//! Small dense linear algebra: row-major matrices, symmetric tridiagonal
//! storage, factorizations and a cyclic Jacobi eigensolver.
//!
//! Dimensions in this crate are desk scale (a few hundred at most), so
//! everything here is dense and allocation-light rather than clever.

use crate::error::NumericError;
use crate::scalar::Scalar;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Euclidean distance.
pub fn dist2<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

/// Squared Euclidean distance.
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::Dimension {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `y = self * x`. Zero entries are skipped so that banded matrices
    /// accumulate exactly the same floating-point sums as their banded
    /// counterparts.
    pub fn matvec_into(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&a, &xj) in self.row(i).iter().zip(x) {
                if a != T::zero() {
                    acc = acc + a * xj;
                }
            }
            *yi = acc;
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d = *d + a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn add(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    /// `self + s * I`
    pub fn shift_diagonal(&self, s: T) -> Matrix<T> {
        assert!(self.is_square());
        let mut m = self.clone();
        for i in 0..self.rows {
            m[(i, i)] = m[(i, i)] + s;
        }
        m
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square() && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn frobenius_norm(&self) -> T {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// `x^T self x`
    pub fn quadratic_form(&self, x: &[T]) -> T {
        dot(x, &self.matvec(x))
    }

    /// Solves `self * x = b` for a symmetric positive definite matrix via
    /// Cholesky.
    pub fn solve_spd(&self, b: &[T]) -> Result<Vec<T>, NumericError> {
        let chol = Cholesky::factor(self)?;
        Ok(chol.solve(b))
    }

    /// Solves `self * x = b` by LU with partial pivoting.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>, NumericError> {
        if !self.is_square() || b.len() != self.rows {
            return Err(NumericError::Dimension {
                expected: self.rows,
                found: b.len(),
            });
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let scale = self.max_abs().max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::from_count(n);
        for col in 0..n {
            let (piv, pval) =
                (col..n)
                    .map(|r| (r, a[r * n + col].abs()))
                    .fold(
                        (col, T::neg_infinity()),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pval <= tiny {
                return Err(NumericError::Singular { pivot: col });
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                x.swap(col, piv);
            }
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / d;
                if f == T::zero() {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] = a[r * n + j] - f * a[col * n + j];
                }
                x[r] = x[r] - f * x[col];
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s = s - a[i * n + j] * x[j];
            }
            x[i] = s / a[i * n + i];
        }
        Ok(x)
    }

    /// Eigen-decomposition of a symmetric matrix.
    pub fn symmetric_eigen(&self) -> Result<SymmetricEigen<T>, NumericError> {
        SymmetricEigen::new(self)
    }

    /// Largest singular value; equals the largest |eigenvalue| for symmetric input.
    pub fn spectral_norm_symmetric(&self) -> Result<T, NumericError> {
        let eig = self.symmetric_eigen()?;
        Ok(eig.values.iter().fold(T::zero(), |m, &v| m.max(v.abs())))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, NumericError> {
        if !a.is_square() {
            return Err(NumericError::Dimension {
                expected: a.rows(),
                found: a.cols(),
            });
        }
        let n = a.rows();
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d = d - l[j * n + k] * l[j * n + k];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(NumericError::NotPositiveDefinite { pivot: j });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s = s - self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns of `vectors`).
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> SymmetricEigen<T> {
    const MAX_SWEEPS: usize = 100;

    /// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
    pub fn new(a: &Matrix<T>) -> Result<Self, NumericError> {
        if !a.is_square() {
            return Err(NumericError::Dimension {
                expected: a.rows(),
                found: a.cols(),
            });
        }
        let n = a.rows();
        let mut m = a.clone();
        let mut v = Matrix::identity(n);
        let scale = a.frobenius_norm();
        if scale == T::zero() {
            return Ok(Self {
                values: vec![T::zero(); n],
                vectors: v,
            });
        }
        let tol = scale * T::epsilon();
        let mut converged = false;
        for _ in 0..Self::MAX_SWEEPS {
            let off = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .fold(T::zero(), |acc, (i, j)| acc + m[(i, j)] * m[(i, j)])
                .sqrt();
            if off <= tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq.abs() <= T::min_positive_value() {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (T::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged {
            return Err(NumericError::NoConvergence {
                what: "jacobi eigensolver",
                iterations: Self::MAX_SWEEPS,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&i| m[(i, i)]).collect();
        let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
        Ok(Self { values, vectors })
    }

    pub fn min(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    pub fn max(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::zero)
    }

    /// Number of eigenvalues with magnitude above `tol`.
    pub fn rank(&self, tol: T) -> usize {
        self.values.iter().filter(|v| v.abs() > tol).count()
    }

    /// Minimum-norm least-squares solution of `A x = b`, ignoring
    /// eigen-directions with |eigenvalue| <= `tol`.
    pub fn pseudo_solve(&self, b: &[T], tol: T) -> Vec<T> {
        let n = self.values.len();
        let mut x = vec![T::zero(); n];
        for (c, &lam) in self.values.iter().enumerate() {
            if lam.abs() <= tol {
                continue;
            }
            let coef = (0..n).fold(T::zero(), |acc, r| acc + self.vectors[(r, c)] * b[r]) / lam;
            for r in 0..n {
                x[r] = x[r] + coef * self.vectors[(r, c)];
            }
        }
        x
    }
}

/// Symmetric tridiagonal matrix stored as its diagonal and first
/// off-diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTridiagonal<T> {
    pub diag: Vec<T>,
    pub off: Vec<T>,
}

impl<T: Scalar> SymTridiagonal<T> {
    /// Extracts the tridiagonal band of `m`; errors if anything outside the
    /// band is nonzero or the band is not symmetric.
    pub fn from_dense(m: &Matrix<T>) -> Result<Self, NumericError> {
        let n = m.rows();
        if !m.is_square() {
            return Err(NumericError::Dimension {
                expected: n,
                found: m.cols(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let outside = i.abs_diff(j) > 1;
                if (outside && m[(i, j)] != T::zero()) || m[(i, j)] != m[(j, i)] {
                    return Err(NumericError::NotTridiagonal { row: i, col: j });
                }
            }
        }
        Ok(Self {
            diag: (0..n).map(|i| m[(i, i)]).collect(),
            off: (0..n.saturating_sub(1)).map(|i| m[(i, i + 1)]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `y = self * x`, skipping zero entries in column order (bitwise equal to
    /// [`Matrix::matvec_into`] on the dense form).
    pub fn matvec_into(&self, x: &[T], y: &mut [T]) {
        let n = self.diag.len();
        for i in 0..n {
            let mut acc = T::zero();
            if i > 0 && self.off[i - 1] != T::zero() {
                acc = acc + self.off[i - 1] * x[i - 1];
            }
            if self.diag[i] != T::zero() {
                acc = acc + self.diag[i] * x[i];
            }
            if i + 1 < n && self.off[i] != T::zero() {
                acc = acc + self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let n = self.diag.len();
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if j == i + 1 {
                self.off[i]
            } else if i == j + 1 {
                self.off[j]
            } else {
                T::zero()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix<f64> {
        let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        b.transpose().matmul(&b).shift_diagonal(0.5)
    }

    #[test]
    fn cholesky_and_lu_agree() {
        let a = spd(6);
        let rhs: Vec<f64> = (0..6).map(|i| i as f64 - 1.5).collect();
        let x1 = a.solve_spd(&rhs).unwrap();
        let x2 = a.solve(&rhs).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-10);
        }
        let r = a.matvec(&x1);
        for (u, v) in r.iter().zip(&rhs) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_lu_is_reported() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(a.solve(&[1.0, 1.0]), Err(NumericError::Singular { .. })));
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = spd(7);
        let eig = a.symmetric_eigen().unwrap();
        let n = 7;
        let lam = Matrix::from_fn(n, n, |i, j| if i == j { eig.values[i] } else { 0.0 });
        let back = eig.vectors.matmul(&lam).matmul(&eig.vectors.transpose());
        assert!(back.sub(&a).max_abs() < 1e-10);
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn pseudo_solve_gives_min_norm() {
        // diag(1, 0): min-norm solution of diag(1,0) x = (2, 0) is (2, 0)
        let a = Matrix::from_row_major(2, 2, vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let x = a.symmetric_eigen().unwrap().pseudo_solve(&[2.0, 0.0], 1e-12);
        assert!((x[0] - 2.0).abs() < 1e-14 && x[1].abs() < 1e-14);
    }

    #[test]
    fn tridiagonal_matvec_is_bitwise_dense() {
        let m = Matrix::from_fn(5, 5, |i, j| match i.abs_diff(j) {
            0 => 2.0 + i as f64 * 0.1,
            1 => -1.0 / 3.0,
            _ => 0.0,
        });
        let t = SymTridiagonal::from_dense(&m).unwrap();
        let x = [0.3, -1.7, 2.2, 1e-3, 5.5];
        let mut y = [0.0; 5];
        t.matvec_into(&x, &mut y);
        assert_eq!(y.to_vec(), m.matvec(&x));
        assert_eq!(t.to_dense(), m);
    }
}
