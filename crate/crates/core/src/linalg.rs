//! Small dense linear algebra over [`Real`] scalars.
//!
//! Problem sizes in this crate stay below a few hundred rows, so everything is
//! a row-major `Vec` with straightforward O(n^3) factorizations.

use std::ops::{Index, IndexMut};

use crate::scalar::{axpy, dot, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
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

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let (out_row, a_row) = (i * other.cols, self.row(i));
            for (k, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                axpy(
                    a,
                    other.row(k),
                    &mut out.data[out_row..out_row + other.cols],
                );
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T v`
    pub fn tr_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len());
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != T::zero() {
                axpy(vi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Real> Cholesky<T> {
    /// Returns `None` when `a` is not (numerically) positive definite.
    pub fn new(a: &Mat<T>) -> Option<Self> {
        let n = a.rows();
        assert_eq!(n, a.cols());
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut s = a[(j, j)];
            for k in 0..j {
                s -= l[(j, k)] * l[(j, k)];
            }
            if !(s > T::zero()) {
                return None;
            }
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        for i in 0..n {
            let s = b[i] - dot(&self.l.row(i)[..i], &b[..i]);
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn solve_upper_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }
}

/// Full Householder QR of a tall matrix `A` (n x m, n >= m): `A = Q R`.
#[derive(Debug, Clone)]
pub struct Qr<T> {
    /// n x n orthogonal factor.
    pub q: Mat<T>,
    /// Leading m x m upper triangle of R.
    pub r: Mat<T>,
}

impl<T: Real> Qr<T> {
    pub fn new(a: &Mat<T>) -> Self {
        let (n, m) = (a.rows(), a.cols());
        assert!(n >= m, "QR needs a tall matrix");
        let mut r = a.clone();
        let mut q = Mat::identity(n);
        let mut v = vec![T::zero(); n];
        for k in 0..m {
            let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<T>().sqrt();
            if norm == T::zero() {
                continue;
            }
            let alpha = if r[(k, k)] > T::zero() { -norm } else { norm };
            for i in 0..n {
                v[i] = if i < k { T::zero() } else { r[(i, k)] };
            }
            v[k] -= alpha;
            let vnorm2 = dot(&v[k..], &v[k..]);
            if vnorm2 == T::zero() {
                continue;
            }
            let two = T::one() + T::one();
            // R <- (I - 2 v v^T / v^T v) R
            for j in k..m {
                let s = (k..n).map(|i| v[i] * r[(i, j)]).sum::<T>() * two / vnorm2;
                for i in k..n {
                    r[(i, j)] -= s * v[i];
                }
            }
            // Q <- Q (I - 2 v v^T / v^T v)
            for i in 0..n {
                let s = (k..n).map(|j| q[(i, j)] * v[j]).sum::<T>() * two / vnorm2;
                for j in k..n {
                    q[(i, j)] -= s * v[j];
                }
            }
        }
        let mut rr = Mat::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                rr[(i, j)] = r[(i, j)];
            }
        }
        Self { q, r: rr }
    }

    /// Smallest absolute diagonal entry of R relative to the largest.
    pub fn rank_ratio(&self) -> T {
        let m = self.r.rows();
        if m == 0 {
            return T::one();
        }
        let diag: Vec<T> = (0..m).map(|i| self.r[(i, i)].abs()).collect();
        let max = diag.iter().fold(T::zero(), |a, &b| a.max(b));
        let min = diag.iter().fold(T::infinity(), |a, &b| a.min(b));
        if max == T::zero() {
            T::zero()
        } else {
            min / max
        }
    }

    /// Solves `R x = b`.
    pub fn solve_r(&self, b: &[T]) -> Vec<T> {
        let m = self.r.rows();
        let mut x = b.to_vec();
        for i in (0..m).rev() {
            let mut s = x[i];
            for k in i + 1..m {
                s -= self.r[(i, k)] * x[k];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }

    /// Solves `R^T x = b`.
    pub fn solve_rt(&self, b: &[T]) -> Vec<T> {
        let m = self.r.rows();
        let mut x = b.to_vec();
        for i in 0..m {
            let mut s = x[i];
            for k in 0..i {
                s -= self.r[(k, i)] * x[k];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }
}
