//! Incremental regularized least squares.
//!
//! [`RlsState`] keeps the inverse of `M = λI + Σ x xᵀ` over the queried
//! inputs together with `s = Σ y x`, so that the ridge estimate is
//! `θ̂ = M⁻¹ s` and the per-round uncertainty `xᵀ M⁻¹ x` costs O(d²).
//! Rank-one updates use Sherman–Morrison; every [`REBUILD_PERIOD`] absorbs
//! the inverse is recomputed from the accumulated `M` to bound drift.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of rank-one updates between full re-inversions.
pub const REBUILD_PERIOD: usize = 256;

/// Square dense matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    /// `scale · I`.
    pub fn scaled_identity(n: usize, scale: T) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = scale;
        }
        m
    }

    /// Builds a matrix from rows; every row must have `rows.len()` entries.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n).map(|i| dot(self.row(i), x)).collect()
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for i in 0..self.n {
            acc = acc + x[i] * dot(self.row(i), x);
        }
        acc
    }

    /// `A ← A + w · u uᵀ`.
    pub fn add_outer(&mut self, w: T, u: &[T]) {
        for i in 0..self.n {
            let wi = w * u[i];
            if wi == T::zero() {
                continue;
            }
            for j in 0..self.n {
                self.data[i * self.n + j] = self.data[i * self.n + j] + wi * u[j];
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Largest `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Lower Cholesky factor, or `None` if the matrix is not numerically
    /// positive definite.
    pub fn cholesky(&self) -> Option<DenseMatrix<T>> {
        let n = self.n;
        let mut l = DenseMatrix::zeros(n);
        for j in 0..n {
            let mut diag = self.get(j, j);
            for k in 0..j {
                diag = diag - l.get(j, k) * l.get(j, k);
            }
            if !(diag > T::zero()) {
                return None;
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s = s - l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / ljj);
            }
        }
        Some(l)
    }

    /// Inverse of a symmetric positive definite matrix via Cholesky.
    pub fn inverse_spd(&self) -> Result<DenseMatrix<T>> {
        let n = self.n;
        let l = self
            .cholesky()
            .ok_or_else(|| Error::NumericalDegeneracy("matrix is not positive definite".into()))?;
        // Invert L column by column, then A⁻¹ = L⁻ᵀ L⁻¹.
        let mut linv = DenseMatrix::zeros(n);
        for col in 0..n {
            for i in col..n {
                let mut s = if i == col { T::one() } else { T::zero() };
                for k in col..i {
                    s = s - l.get(i, k) * linv.get(k, col);
                }
                linv.set(i, col, s / l.get(i, i));
            }
        }
        let mut inv = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = T::zero();
                for k in i..n {
                    s = s + linv.get(k, i) * linv.get(k, j);
                }
                inv.set(i, j, s);
                inv.set(j, i, s);
            }
        }
        Ok(inv)
    }

    /// `ln det A` for a symmetric positive definite matrix.
    pub fn log_det_spd(&self) -> Result<T> {
        let l = self
            .cholesky()
            .ok_or_else(|| Error::NumericalDegeneracy("matrix is not positive definite".into()))?;
        let two = T::one() + T::one();
        Ok((0..self.n).fold(T::zero(), |acc, i| acc + two * l.get(i, i).ln()))
    }

    /// Solves `A z = b` for symmetric positive definite `A`.
    pub fn solve_spd(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.n;
        let l = self
            .cholesky()
            .ok_or_else(|| Error::NumericalDegeneracy("matrix is not positive definite".into()))?;
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s = s - l.get(i, k) * z[k];
            }
            z[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s = s - l.get(k, i) * z[k];
            }
            z[i] = s / l.get(i, i);
        }
        Ok(z)
    }

    /// Appends one row and column: `[[A, b], [bᵀ, c]]`.
    pub fn bordered(&self, b: &[T], c: T) -> DenseMatrix<T> {
        let n = self.n;
        let mut out = DenseMatrix::zeros(n + 1);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, self.get(i, j));
            }
            out.set(i, n, b[i]);
            out.set(n, i, b[i]);
        }
        out.set(n, n, c);
        out
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

pub fn norm_squared<T: Scalar>(x: &[T]) -> T {
    dot(x, x)
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains NaN or infinite entries")))
    }
}

/// Ridge posterior over the queried examples.
#[derive(Clone, Debug)]
pub struct RlsState<T> {
    dim: usize,
    lambda: T,
    gram: DenseMatrix<T>,
    gram_inv: DenseMatrix<T>,
    xty: Vec<T>,
    query_count: usize,
    updates_since_rebuild: usize,
}

impl<T: Scalar> RlsState<T> {
    /// Fresh state with `λ = 1/C²`, so `M⁻¹ = C² I`.
    pub fn new(dim: usize, norm_bound: T) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(norm_bound > T::zero()) || !norm_bound.is_finite() {
            return Err(Error::invalid("norm bound C must be positive and finite"));
        }
        let c2 = norm_bound * norm_bound;
        let lambda = T::one() / c2;
        Ok(Self {
            dim,
            lambda,
            gram: DenseMatrix::scaled_identity(dim, lambda),
            gram_inv: DenseMatrix::scaled_identity(dim, c2),
            xty: vec![T::zero(); dim],
            query_count: 0,
            updates_since_rebuild: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn gram_inv(&self) -> &DenseMatrix<T> {
        &self.gram_inv
    }

    /// The accumulated `λI + Σ x xᵀ`.
    pub fn gram(&self) -> &DenseMatrix<T> {
        &self.gram
    }

    pub fn xty(&self) -> &[T] {
        &self.xty
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn updates_since_rebuild(&self) -> usize {
        self.updates_since_rebuild
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Adds one labeled example.
    pub fn absorb(&mut self, x: &[T], y: T) -> Result<()> {
        self.check_dim(x)?;
        check_finite(x, "input")?;
        if !y.is_finite() {
            return Err(Error::invalid("label is NaN or infinite"));
        }

        let mx = self.gram_inv.mul_vec(x);
        let denom = T::one() + dot(x, &mx);
        self.gram_inv.add_outer(-T::one() / denom, &mx);
        self.gram.add_outer(T::one(), x);
        for (s, xi) in self.xty.iter_mut().zip(x) {
            *s = *s + y * *xi;
        }
        self.query_count += 1;
        self.updates_since_rebuild += 1;

        if self.updates_since_rebuild >= REBUILD_PERIOD {
            self.rebuild()?;
        }
        Ok(())
    }

    /// Recomputes `M⁻¹` from the accumulated `M`.
    pub fn rebuild(&mut self) -> Result<()> {
        self.gram_inv = self.gram.inverse_spd()?;
        self.updates_since_rebuild = 0;
        Ok(())
    }

    /// `‖x‖²_{M⁻¹}`.
    pub fn quad_form(&self, x: &[T]) -> Result<T> {
        self.check_dim(x)?;
        // Round-off can push a tiny value below zero.
        Ok(self.gram_inv.quad_form(x).max(T::zero()))
    }

    /// `θ̂ = M⁻¹ s`.
    pub fn theta_hat(&self) -> Vec<T> {
        self.gram_inv.mul_vec(&self.xty)
    }
}
