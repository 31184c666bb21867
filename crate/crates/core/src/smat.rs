//! Small dense matrices over any [`Scalar`], with an LU solver.
//!
//! nalgebra is used for plain `f64` linear algebra elsewhere; this type
//! exists so frame matrices and Jacobian blocks can be manipulated at dual
//! scalars. Pivoting compares primal magnitudes, so a factorization at a
//! dual type follows the same pivot sequence as the underlying `f64`
//! problem.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pivot magnitudes below this are treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SMat<S> {
    rows: usize,
    cols: usize,
    a: Vec<S>,
}

impl<S: Scalar> SMat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SMat {
            rows,
            cols,
            a: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut a = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                a.push(f(i, j));
            }
        }
        SMat { rows, cols, a }
    }

    /// Row-major construction from a flat slice.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[S]) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        SMat {
            rows,
            cols,
            a: data.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.a[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.a[i * self.cols + j] = v;
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> SMat<T> {
        SMat {
            rows: self.rows,
            cols: self.cols,
            a: self.a.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> SMat<S> {
        SMat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                let mut s = S::zero();
                for j in 0..self.cols {
                    s = s + self.get(i, j) * x[j];
                }
                s
            })
            .collect()
    }

    pub fn matmul(&self, o: &SMat<S>) -> SMat<S> {
        assert_eq!(self.cols, o.rows, "matmul dimension mismatch");
        SMat::from_fn(self.rows, o.cols, |i, j| {
            let mut s = S::zero();
            for k in 0..self.cols {
                s = s + self.get(i, k) * o.get(k, j);
            }
            s
        })
    }

    pub fn add(&self, o: &SMat<S>) -> SMat<S> {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        SMat::from_fn(self.rows, self.cols, |i, j| self.get(i, j) + o.get(i, j))
    }

    pub fn sub(&self, o: &SMat<S>) -> SMat<S> {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        SMat::from_fn(self.rows, self.cols, |i, j| self.get(i, j) - o.get(i, j))
    }

    pub fn scale(&self, c: S) -> SMat<S> {
        SMat::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * c)
    }

    /// LU factorization with partial pivoting on primal magnitudes.
    pub fn lu(&self) -> Result<Lu<S>> {
        assert_eq!(self.rows, self.cols, "lu requires a square matrix");
        let n = self.rows;
        let mut m = self.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (mut best, mut best_mag) = (k, m.get(k, k).value().abs());
            for i in (k + 1)..n {
                let mag = m.get(i, k).value().abs();
                if mag > best_mag {
                    best = i;
                    best_mag = mag;
                }
            }
            if best_mag < PIVOT_TOL {
                return Err(Error::SingularMatrix {
                    pivot: best_mag,
                    col: k,
                });
            }
            if best != k {
                for j in 0..n {
                    let t = m.get(k, j);
                    m.set(k, j, m.get(best, j));
                    m.set(best, j, t);
                }
                piv.swap(k, best);
            }
            let pivot = m.get(k, k);
            for i in (k + 1)..n {
                let l = m.get(i, k) / pivot;
                m.set(i, k, l);
                for j in (k + 1)..n {
                    let v = m.get(i, j) - l * m.get(k, j);
                    m.set(i, j, v);
                }
            }
        }
        Ok(Lu { lu: m, piv })
    }

    pub fn solve(&self, rhs: &[S]) -> Result<Vec<S>> {
        self.lu()?.solve(rhs)
    }

    pub fn inverse(&self) -> Result<SMat<S>> {
        let n = self.rows;
        let lu = self.lu()?;
        let mut inv = SMat::zeros(n, n);
        let mut e = vec![S::zero(); n];
        for j in 0..n {
            e[j] = S::one();
            let col = lu.solve(&e)?;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
            e[j] = S::zero();
        }
        Ok(inv)
    }

    /// Product of the diagonal of U, signed by the pivot permutation.
    pub fn det(&self) -> S {
        match self.lu() {
            Ok(lu) => {
                let n = self.rows;
                let mut d = S::one();
                for i in 0..n {
                    d = d * lu.lu.get(i, i);
                }
                // Sign of the permutation.
                let mut perm = lu.piv.clone();
                let mut sign = 1.0;
                for i in 0..n {
                    while perm[i] != i {
                        let t = perm[i];
                        perm.swap(i, t);
                        sign = -sign;
                    }
                }
                d * S::from_f64(sign)
            }
            Err(_) => S::zero(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .map(|x| x.value().abs())
            .fold(0.0, f64::max)
    }
}

impl SMat<f64> {
    pub fn to_na(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

/// Packed LU factors and the pivot permutation.
#[derive(Debug)]
pub struct Lu<S> {
    lu: SMat<S>,
    piv: Vec<usize>,
}

impl<S: Scalar> Lu<S> {
    pub fn solve(&self, rhs: &[S]) -> Result<Vec<S>> {
        let n = self.lu.nrows();
        assert_eq!(rhs.len(), n, "solve dimension mismatch");
        let mut x: Vec<S> = self.piv.iter().map(|&p| rhs[p]).collect();
        // Forward substitution (unit lower triangle).
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s = s - self.lu.get(i, j) * x[j];
            }
            x[i] = s;
        }
        // Back substitution.
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s = s - self.lu.get(i, j) * x[j];
            }
            x[i] = s / self.lu.get(i, i);
        }
        Ok(x)
    }
}

/// A rank-3 array indexed as `t[(i, j, k)]`.
#[derive(Clone, Debug)]
pub struct Ten3<S> {
    d0: usize,
    d1: usize,
    d2: usize,
    a: Vec<S>,
}

impl<S: Scalar> Ten3<S> {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Ten3 {
            d0,
            d1,
            d2,
            a: vec![S::zero(); d0 * d1 * d2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> S {
        self.a[(i * self.d1 + j) * self.d2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: S) {
        self.a[(i * self.d1 + j) * self.d2 + k] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .map(|x| x.value().abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{Dual, D1};
    use approx::assert_relative_eq;

    #[test]
    fn lu_solves_a_known_system() {
        let a = SMat::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 4.0, -6.0, 0.0, -2.0, 7.0, 2.0]);
        let x = a.solve(&[5.0, -2.0, 9.0]).unwrap();
        let expect = [1.0, 1.0, 2.0];
        for i in 0..3 {
            assert_relative_eq!(x[i], expect[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn inverse_roundtrips() {
        let a = SMat::from_row_slice(3, 3, &[1.0, 2.0, 0.5, 0.0, 1.0, -1.0, 3.0, 0.2, 2.0]);
        let inv = a.inverse().unwrap();
        let id = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(id.get(i, j), e, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = SMat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        match a.lu() {
            Err(crate::error::Error::SingularMatrix { .. }) => {}
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn dual_solve_differentiates_the_solution() {
        // A(t) x(t) = b with A = [[1+t, 0], [0, 2]], b = [1, 1].
        // x = [1/(1+t), 1/2]; dx0/dt at t=0 is -1.
        let t = D1::seeded(0.0);
        let a = SMat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => Dual::constant(1.0) + t,
            (1, 1) => Dual::constant(2.0),
            _ => Dual::constant(0.0),
        });
        let x = a.solve(&[Dual::constant(1.0), Dual::constant(1.0)]).unwrap();
        assert_relative_eq!(x[0].re, 1.0);
        assert_relative_eq!(x[0].du, -1.0);
        assert_relative_eq!(x[1].re, 0.5);
        assert_relative_eq!(x[1].du, 0.0);
    }

    #[test]
    fn det_tracks_pivot_sign() {
        let a = SMat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_relative_eq!(a.det(), -1.0);
        let b = SMat::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 1.0]);
        assert_relative_eq!(b.det(), 2.0, max_relative = 1e-14);
    }
}
