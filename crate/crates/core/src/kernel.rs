//! Kernelised QuFUR in dual form.
//!
//! Predictions and uncertainties are computed from the queried inputs only:
//! with `k_t = [k(x, x_i)]` and `M = λI + K`,
//! `ŷ = clip(k_tᵀ M⁻¹ Y)` and `‖k_t‖²_{M⁻¹} = (k(x,x) − k_tᵀ M⁻¹ k_t)/λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, dot, DenseMatrix, REBUILD_PERIOD};
use crate::policy::{query_probability, PolicyConfig, RoundDecision};
use crate::scalar::{self, Scalar};

/// Largest queried set a kernel learner will hold.
pub const MAX_KERNEL_QUERIES: usize = 2000;

/// Tolerance below zero tolerated in the posterior variance before it is
/// treated as a degeneracy.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-9;

/// A positive definite kernel.
pub trait Kernel<T: Scalar> {
    fn eval(&self, a: &[T], b: &[T]) -> T;
}

/// The built-in kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum KernelFunction<T> {
    Linear,
    /// `exp(−γ ‖a − b‖²)`.
    Rbf { gamma: T },
}

impl<T: Scalar> Kernel<T> for KernelFunction<T> {
    fn eval(&self, a: &[T], b: &[T]) -> T {
        match *self {
            KernelFunction::Linear => dot(a, b),
            KernelFunction::Rbf { gamma } => {
                let d2 = a
                    .iter()
                    .zip(b)
                    .fold(T::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y));
                (-gamma * d2).exp()
            }
        }
    }
}

/// Queried set plus `(λI + K)⁻¹`.
#[derive(Clone, Debug)]
pub struct KernelState<T, K = KernelFunction<T>> {
    kernel: K,
    lambda: T,
    inputs: Vec<Vec<T>>,
    labels: Vec<T>,
    m_inv: DenseMatrix<T>,
    updates_since_rebuild: usize,
}

impl<T: Scalar, K: Kernel<T>> KernelState<T, K> {
    /// Empty state with `λ = 1/C²`.
    pub fn new(kernel: K, norm_bound: T) -> Result<Self> {
        if !(norm_bound > T::zero()) || !norm_bound.is_finite() {
            return Err(Error::invalid("norm bound C must be positive and finite"));
        }
        Ok(Self {
            kernel,
            lambda: T::one() / (norm_bound * norm_bound),
            inputs: Vec::new(),
            labels: Vec::new(),
            m_inv: DenseMatrix::zeros(0),
            updates_since_rebuild: 0,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn queried_inputs(&self) -> &[Vec<T>] {
        &self.inputs
    }

    pub fn queried_labels(&self) -> &[T] {
        &self.labels
    }

    pub fn m_inv(&self) -> &DenseMatrix<T> {
        &self.m_inv
    }

    fn kernel_column(&self, x: &[T]) -> Vec<T> {
        self.inputs.iter().map(|xi| self.kernel.eval(x, xi)).collect()
    }

    /// `λI + K` over the queried inputs, built from scratch.
    pub fn regularized_gram(&self) -> DenseMatrix<T> {
        let n = self.inputs.len();
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.kernel.eval(&self.inputs[i], &self.inputs[j]);
                m.set(i, j, v);
                m.set(j, i, v);
            }
            m.set(i, i, m.get(i, i) + self.lambda);
        }
        m
    }

    /// `clip(k_tᵀ M⁻¹ Y)`; zero when nothing has been queried.
    pub fn predict(&self, x: &[T]) -> T {
        if self.inputs.is_empty() {
            return T::zero();
        }
        let k = self.kernel_column(x);
        let weights = self.m_inv.mul_vec(&self.labels);
        scalar::clip(dot(&k, &weights))
    }

    /// `(k(x,x) − k_tᵀ M⁻¹ k_t) / λ`, clamped at zero.
    pub fn posterior_norm(&self, x: &[T]) -> Result<T> {
        let kxx = self.kernel.eval(x, x);
        let inner = if self.inputs.is_empty() {
            kxx
        } else {
            let k = self.kernel_column(x);
            kxx - self.m_inv.quad_form(&k)
        };
        if inner < -T::of(NEGATIVE_VARIANCE_TOLERANCE) {
            return Err(Error::NumericalDegeneracy(format!(
                "posterior variance {inner} is negative"
            )));
        }
        Ok(inner.max(T::zero()) / self.lambda)
    }

    /// `η̃² · min(1, ‖k_t‖²_{M⁻¹})`.
    pub fn uncertainty(&self, x: &[T], eta: T) -> Result<T> {
        let et = scalar::eta_tilde(eta);
        Ok(et * et * self.posterior_norm(x)?.min(T::one()))
    }

    /// Appends a labeled example, updating `M⁻¹` by block inversion.
    pub fn absorb(&mut self, x: &[T], y: T) -> Result<()> {
        check_finite(x, "input")?;
        if !y.is_finite() {
            return Err(Error::invalid("label is NaN or infinite"));
        }
        if let Some(first) = self.inputs.first() {
            if first.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    got: x.len(),
                });
            }
        }
        if self.inputs.len() >= MAX_KERNEL_QUERIES {
            return Err(Error::ResourceLimit(format!(
                "kernel learner holds at most {MAX_KERNEL_QUERIES} queried examples"
            )));
        }

        let b = self.kernel_column(x);
        let c = self.kernel.eval(x, x) + self.lambda;
        let n = self.inputs.len();
        let ab = self.m_inv.mul_vec(&b);
        let schur = c - dot(&b, &ab);
        if !(schur > T::zero()) {
            return Err(Error::NumericalDegeneracy(format!(
                "Schur complement {schur} is not positive"
            )));
        }
        let inv_s = T::one() / schur;
        let mut next = DenseMatrix::zeros(n + 1);
        for i in 0..n {
            for j in 0..n {
                next.set(i, j, self.m_inv.get(i, j) + ab[i] * ab[j] * inv_s);
            }
            next.set(i, n, -ab[i] * inv_s);
            next.set(n, i, -ab[i] * inv_s);
        }
        next.set(n, n, inv_s);

        self.m_inv = next;
        self.inputs.push(x.to_vec());
        self.labels.push(y);
        self.updates_since_rebuild += 1;
        if self.updates_since_rebuild >= REBUILD_PERIOD {
            self.m_inv = self.regularized_gram().inverse_spd()?;
            self.updates_since_rebuild = 0;
        }
        Ok(())
    }
}

/// One round of kernelised QuFUR(α); the caller absorbs on a query.
pub fn kernel_qufur_step<T: Scalar, K: Kernel<T>, R: rand::RngCore + ?Sized>(
    state: &KernelState<T, K>,
    cfg: &PolicyConfig<T>,
    x: &[T],
    rng: &mut R,
) -> Result<RoundDecision<T>> {
    let prediction = state.predict(x);
    let delta = state.uncertainty(x, cfg.noise_level)?;
    let remaining = cfg
        .effective_budget()
        .map_or(usize::MAX, |b| b.saturating_sub(state.len()));
    if remaining == 0 {
        return Ok(RoundDecision {
            prediction,
            delta,
            query_prob: T::zero(),
            queried: false,
        });
    }
    let query_prob = query_probability(cfg.alpha, delta);
    let queried = crate::policy::bernoulli_query(query_prob, remaining, rng)?;
    Ok(RoundDecision {
        prediction,
        delta,
        query_prob,
        queried,
    })
}

/// Smallest `j ≥ 1` with `j λ ln s > Σ_{i>j} (λ_i − λ)`.
///
/// `eigenvalues` are those of `λI + K` sorted non-increasing.
pub fn effective_dimension<T: Scalar>(eigenvalues: &[T], lambda: T, s: usize) -> Result<usize> {
    if s < 2 {
        return Err(Error::invalid("s must be at least 2 so that ln s > 0"));
    }
    if eigenvalues.is_empty() {
        return Err(Error::invalid("eigenvalue list is empty"));
    }
    if !(lambda > T::zero()) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let slack = T::of(1e-9) * lambda.max(T::one());
    for w in eigenvalues.windows(2) {
        if w[1] > w[0] {
            return Err(Error::invalid("eigenvalues must be sorted non-increasing"));
        }
    }
    if eigenvalues.iter().any(|e| *e < lambda - slack) {
        return Err(Error::invalid("every eigenvalue must be at least lambda"));
    }

    let ln_s = T::of_usize(s).ln();
    let excess: Vec<T> = eigenvalues.iter().map(|e| (*e - lambda).max(T::zero())).collect();
    // tail[j] = Σ_{i ≥ j} excess[i] (0-based), so Λ_{s,j} = tail[j] for 1-based j.
    let mut tail = vec![T::zero(); excess.len() + 1];
    for i in (0..excess.len()).rev() {
        tail[i] = tail[i + 1] + excess[i];
    }
    for j in 1..=eigenvalues.len() {
        if T::of_usize(j) * lambda * ln_s > tail[j] {
            return Ok(j);
        }
    }
    Ok(eigenvalues.len())
}
