//! Query policies over the linear ridge learner.
//!
//! QuFUR(α) queries with probability `min(1, α Δ)` where
//! `Δ = η̃² min(1, ‖x‖²_{M⁻¹})`. The fixed-budget master runs a geometric
//! grid of such rules against a single shared estimator, each copy holding
//! an equal slice of the label budget. Uniform, greedy and domain-aware
//! oracle baselines reduce to [`bernoulli_query`] with a fixed rate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, RlsState};
use crate::scalar::{self, Scalar};

/// Parameters shared by the linear query policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig<T> {
    pub alpha: T,
    /// Noise level η; the policies use `η̃ = max(1, η)`.
    pub noise_level: T,
    /// Norm bound C on the ground truth, giving `λ = 1/C²`.
    pub norm_bound: T,
    /// Hard cap on the number of label queries.
    pub budget: Option<usize>,
    pub horizon: usize,
}

impl<T: Scalar> PolicyConfig<T> {
    pub fn new(
        alpha: T,
        noise_level: T,
        norm_bound: T,
        budget: Option<usize>,
        horizon: usize,
    ) -> Result<Self> {
        let cfg = Self {
            alpha,
            noise_level,
            norm_bound,
            budget,
            horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be a finite non-negative number"));
        }
        if !(self.noise_level >= T::zero()) || !self.noise_level.is_finite() {
            return Err(Error::invalid("noise level must be a finite non-negative number"));
        }
        if !(self.norm_bound > T::zero()) || !self.norm_bound.is_finite() {
            return Err(Error::invalid("norm bound C must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        Ok(())
    }

    pub fn eta_tilde(&self) -> T {
        scalar::eta_tilde(self.noise_level)
    }

    /// Budget clamped to the horizon.
    pub fn effective_budget(&self) -> Option<usize> {
        self.budget.map(|b| b.min(self.horizon))
    }
}

/// What a policy did in one round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDecision<T> {
    pub prediction: T,
    pub delta: T,
    pub query_prob: T,
    pub queried: bool,
}

/// `clip(⟨θ̂, x⟩)`.
pub fn predict<T: Scalar>(state: &RlsState<T>, x: &[T]) -> Result<T> {
    if x.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: x.len(),
        });
    }
    Ok(scalar::clip(dot(&state.theta_hat(), x)))
}

/// `η̃² · min(1, ‖x‖²_{M⁻¹})`.
pub fn uncertainty<T: Scalar>(state: &RlsState<T>, x: &[T], eta: T) -> Result<T> {
    let et = scalar::eta_tilde(eta);
    Ok(et * et * state.quad_form(x)?.min(T::one()))
}

/// `min(1, α Δ)`; the cap is inclusive so `α Δ = 1` queries surely.
pub fn query_probability<T: Scalar>(alpha: T, delta: T) -> T {
    (alpha * delta).min(T::one()).max(T::zero())
}

/// Draws a Bernoulli(p) query decision, refusing when no budget remains.
pub fn bernoulli_query<T: Scalar, R: RngCore + ?Sized>(
    p: T,
    remaining_budget: usize,
    rng: &mut R,
) -> Result<bool> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(Error::invalid(format!("query probability {p} outside [0, 1]")));
    }
    if remaining_budget == 0 {
        return Ok(false);
    }
    Ok(rng.random::<f64>() < p.as_f64())
}

/// One round of QuFUR(α). The caller absorbs the label if `queried`.
pub fn qufur_step<T: Scalar, R: RngCore + ?Sized>(
    state: &RlsState<T>,
    cfg: &PolicyConfig<T>,
    x: &[T],
    rng: &mut R,
) -> Result<RoundDecision<T>> {
    let prediction = predict(state, x)?;
    let delta = uncertainty(state, x, cfg.noise_level)?;
    let remaining = cfg
        .effective_budget()
        .map_or(usize::MAX, |b| b.saturating_sub(state.query_count()));
    if remaining == 0 {
        return Ok(RoundDecision {
            prediction,
            delta,
            query_prob: T::zero(),
            queried: false,
        });
    }
    let query_prob = query_probability(cfg.alpha, delta);
    let queried = bernoulli_query(query_prob, remaining, rng)?;
    Ok(RoundDecision {
        prediction,
        delta,
        query_prob,
        queried,
    })
}

/// Independent uniform draws keyed by `(round, copy)`.
///
/// Each copy reads its own ChaCha stream at a word offset fixed by the
/// round, so a draw does not depend on which other copies were evaluated.
#[derive(Clone, Copy, Debug)]
pub struct CopyStreams {
    seed: u64,
}

impl CopyStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn uniform(&self, round: usize, copy: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(copy as u64);
        rng.set_word_pos(2 * round as u128);
        rng.random::<f64>()
    }
}

/// Smallest `k` with `2^k ≥ T³`, i.e. `⌈3 log₂ T⌉`, computed exactly.
pub fn master_copy_exponent(horizon: usize) -> usize {
    let cube = (horizon as u128).pow(3);
    let mut k = 0usize;
    while (1u128 << k) < cube {
        k += 1;
    }
    k
}

/// `3 ⌈log₂ T⌉`, the grid size of the general-class master.
pub fn general_master_copy_exponent(horizon: usize) -> usize {
    let mut k = 0usize;
    while (1u128 << k) < horizon as u128 {
        k += 1;
    }
    3 * k
}

/// `α_i = 2^i / T²` for `i = 0..=k`.
pub fn geometric_alphas<T: Scalar>(k: usize, horizon: usize) -> Vec<T> {
    let t2 = (horizon as f64) * (horizon as f64);
    (0..=k)
        .map(|i| T::of(2f64.powi(i as i32) / t2))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyBudget<T> {
    pub alpha: T,
    pub spent: usize,
}

/// Per-copy budget bookkeeping for the multi-copy master algorithms.
///
/// `k + 1` copies share `⌊B/(k+1)⌋` labels each, and the master stops
/// outright once `B` labels were requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger<T> {
    copies: Vec<CopyBudget<T>>,
    per_copy_budget: usize,
    budget: usize,
    total_spent: usize,
}

impl<T: Scalar> BudgetLedger<T> {
    pub fn new(alphas: Vec<T>, budget: usize) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("master needs at least one copy"));
        }
        let per_copy_budget = budget / alphas.len();
        Ok(Self {
            copies: alphas
                .into_iter()
                .map(|alpha| CopyBudget { alpha, spent: 0 })
                .collect(),
            per_copy_budget,
            budget,
            total_spent: 0,
        })
    }

    pub fn copies(&self) -> &[CopyBudget<T>] {
        &self.copies
    }

    pub fn per_copy_budget(&self) -> usize {
        self.per_copy_budget
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn total_spent(&self) -> usize {
        self.total_spent
    }

    /// Lets every live copy vote on the current round. Returns the
    /// effective query probability and whether a label is requested.
    pub fn decide(&mut self, delta: T, round: usize, streams: &CopyStreams) -> (T, bool) {
        if self.total_spent >= self.budget {
            return (T::zero(), false);
        }
        let mut none_fire = 1.0f64;
        let mut fired = false;
        for (i, copy) in self.copies.iter_mut().enumerate() {
            if copy.spent >= self.per_copy_budget {
                continue;
            }
            let p = query_probability(copy.alpha, delta).as_f64();
            none_fire *= 1.0 - p;
            if streams.uniform(round, i) < p {
                copy.spent += 1;
                fired = true;
            }
        }
        if fired {
            self.total_spent += 1;
        }
        (T::of(1.0 - none_fire), fired)
    }
}

/// Fixed-budget master over a shared ridge estimator.
#[derive(Clone, Debug)]
pub struct MasterState<T> {
    pub ledger: BudgetLedger<T>,
    pub shared_rls: RlsState<T>,
}

impl<T: Scalar> MasterState<T> {
    /// `k = ⌈3 log₂ T⌉` copies with `α_i = 2^i/T²`.
    pub fn new(dim: usize, cfg: &PolicyConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let budget = cfg
            .effective_budget()
            .ok_or_else(|| Error::invalid("fixed-budget master requires a budget"))?;
        let k = master_copy_exponent(cfg.horizon);
        Ok(Self {
            ledger: BudgetLedger::new(geometric_alphas(k, cfg.horizon), budget)?,
            shared_rls: RlsState::new(dim, cfg.norm_bound)?,
        })
    }

    pub fn absorb(&mut self, x: &[T], y: T) -> Result<()> {
        self.shared_rls.absorb(x, y)
    }
}

/// One round of the fixed-budget master; `round` keys the copy draws.
pub fn fixed_budget_step<T: Scalar>(
    master: &mut MasterState<T>,
    cfg: &PolicyConfig<T>,
    x: &[T],
    round: usize,
    streams: &CopyStreams,
) -> Result<RoundDecision<T>> {
    let prediction = predict(&master.shared_rls, x)?;
    let delta = uncertainty(&master.shared_rls, x, cfg.noise_level)?;
    let (query_prob, queried) = master.ledger.decide(delta, round, streams);
    Ok(RoundDecision {
        prediction,
        delta,
        query_prob,
        queried,
    })
}

/// Domain-aware query rates `μ_u = min(1, C* √(d_u/T_u))` with `C*` chosen
/// so that `Σ μ_u T_u = min(B, Σ T_u)`.
pub fn oracle_rates<T: Scalar>(domains: &[(usize, usize)], budget: usize) -> Result<Vec<T>> {
    if domains.is_empty() {
        return Err(Error::invalid("oracle rates need at least one domain"));
    }
    for &(d, t) in domains {
        if d == 0 || t < d {
            return Err(Error::invalid(format!(
                "domain (d={d}, T={t}) must satisfy 1 <= d <= T"
            )));
        }
    }
    let total: usize = domains.iter().map(|&(_, t)| t).sum();
    if budget >= total {
        return Ok(vec![T::one(); domains.len()]);
    }
    if budget == 0 {
        return Ok(vec![T::zero(); domains.len()]);
    }

    let ratio: Vec<f64> = domains
        .iter()
        .map(|&(d, t)| (d as f64 / t as f64).sqrt())
        .collect();
    let spend = |c: f64| -> f64 {
        domains
            .iter()
            .zip(&ratio)
            .map(|(&(_, t), r)| (c * r).min(1.0) * t as f64)
            .sum()
    };
    let target = budget as f64;
    let mut lo = 0.0f64;
    let mut hi = ratio.iter().map(|r| 1.0 / r).fold(0.0, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spend(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut c = 0.5 * (lo + hi);

    // Solve exactly on the saturation pattern found by bisection.
    let saturated: Vec<bool> = ratio.iter().map(|r| c * r >= 1.0).collect();
    let sat_spend: f64 = domains
        .iter()
        .zip(&saturated)
        .filter(|(_, s)| **s)
        .map(|(&(_, t), _)| t as f64)
        .sum();
    let free_weight: f64 = domains
        .iter()
        .zip(&saturated)
        .filter(|(_, s)| !**s)
        .map(|(&(d, t), _)| ((d * t) as f64).sqrt())
        .sum();
    if free_weight > 0.0 {
        let refined = (target - sat_spend) / free_weight;
        let consistent = ratio
            .iter()
            .zip(&saturated)
            .all(|(r, s)| *s || refined * r <= 1.0 + 1e-12);
        if consistent && refined >= 0.0 {
            c = refined;
        }
    }
    Ok(ratio.iter().map(|r| T::of((c * r).min(1.0))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(alpha: f64, eta: f64, c: f64, budget: Option<usize>, horizon: usize) -> PolicyConfig<f64> {
        PolicyConfig::new(alpha, eta, c, budget, horizon).unwrap()
    }

    #[test]
    fn predict_examples() {
        let mut s = RlsState::<f64>::new(2, 1.0).unwrap();
        assert_eq!(predict(&s, &[0.3, -0.7]).unwrap(), 0.0);
        s.absorb(&[1.0, 0.0], 2.0).unwrap();
        assert_abs_diff_eq!(predict(&s, &[1.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);

        // θ̂ = [50] after absorbing (1, 100) with λ = 1; ⟨θ̂, x⟩ = 3.2 at x = 0.064.
        let mut big = RlsState::<f64>::new(1, 1.0).unwrap();
        big.absorb(&[1.0], 100.0).unwrap();
        assert_eq!(predict(&big, &[0.064]).unwrap(), 1.0);
        assert_eq!(predict(&big, &[-0.064]).unwrap(), -1.0);
        assert!(predict(&big, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let s = RlsState::<f64>::new(3, 1.0).unwrap();
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(uncertainty(&s, &e1, 0.0).unwrap(), 1.0);
        assert_eq!(uncertainty(&s, &e1, 2.0).unwrap(), 4.0);
        let s2 = RlsState::<f64>::new(3, 2.0).unwrap();
        assert_eq!(uncertainty(&s2, &e1, 0.0).unwrap(), 1.0);
        assert!(uncertainty(&s2, &[1.0], 0.0).is_err());
    }

    #[test]
    fn qufur_step_extremes() {
        let s = RlsState::<f64>::new(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = qufur_step(&s, &cfg(0.0, 0.0, 1.0, None, 10), &[1.0, 0.0], &mut rng).unwrap();
            assert_eq!(d.query_prob, 0.0);
            assert!(!d.queried);
        }
        let d = qufur_step(&s, &cfg(1e9, 0.0, 1.0, None, 10), &[1.0, 0.0], &mut rng).unwrap();
        assert_eq!(d.query_prob, 1.0);
        assert!(d.queried);
    }

    #[test]
    fn qufur_step_budget_clamp_reports_zero_probability() {
        let mut s = RlsState::<f64>::new(2, 1.0).unwrap();
        s.absorb(&[0.0, 1.0], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = qufur_step(&s, &cfg(1e9, 0.0, 1.0, Some(1), 10), &[1.0, 0.0], &mut rng).unwrap();
        assert!(!d.queried);
        assert_eq!(d.query_prob, 0.0);
        assert_eq!(d.delta, 1.0);
    }

    #[test]
    fn experiment_alpha_values_are_valid() {
        for a in [0.25, 0.5, 1.0] {
            assert!(PolicyConfig::new(a, 0.0, 1.0, None, 875).is_ok());
        }
        assert!(PolicyConfig::new(-0.1, 0.0, 1.0, None, 10).is_err());
        assert!(PolicyConfig::new(1.0, 0.0, 0.0, None, 10).is_err());
    }

    #[test]
    fn inclusive_probability_cap() {
        assert_eq!(query_probability(2.0, 0.5), 1.0);
        assert_eq!(query_probability(4.0, 0.5), 1.0);
        assert_eq!(query_probability(0.5, 0.5), 0.25);
    }

    #[test]
    fn bernoulli_query_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(!bernoulli_query(0.0, 5, &mut rng).unwrap());
        assert!(bernoulli_query(1.0, 5, &mut rng).unwrap());
        assert!(!bernoulli_query(1.0, 0, &mut rng).unwrap());
        assert!(bernoulli_query(1.5, 5, &mut rng).is_err());
        assert!(bernoulli_query(-0.1, 5, &mut rng).is_err());
        let hits = (0..10_000)
            .filter(|_| bernoulli_query(0.5, 1, &mut rng).unwrap())
            .count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn master_grid_for_t_1024() {
        assert_eq!(master_copy_exponent(1024), 30);
        let alphas: Vec<f64> = geometric_alphas(30, 1024);
        assert_eq!(alphas.len(), 31);
        assert_eq!(alphas[0], 2f64.powi(-20));
        assert_eq!(alphas[30], 2f64.powi(10));
        assert_eq!(master_copy_exponent(1), 0);
        assert_eq!(master_copy_exponent(2), 3);
        assert_eq!(master_copy_exponent(500), 27);
        assert_eq!(general_master_copy_exponent(1024), 30);
        assert_eq!(general_master_copy_exponent(500), 27);
        assert_eq!(general_master_copy_exponent(1000), 30);
        assert_eq!(master_copy_exponent(1000), 30);
    }

    #[test]
    fn master_with_zero_budget_never_queries() {
        let c = cfg(0.0, 0.0, 1.0, Some(0), 64);
        let mut m = MasterState::new(2, &c).unwrap();
        let streams = CopyStreams::new(5);
        for t in 0..64 {
            let d = fixed_budget_step(&mut m, &c, &[1.0, 0.0], t, &streams).unwrap();
            assert!(!d.queried);
            assert_eq!(d.query_prob, 0.0);
        }
    }

    #[test]
    fn master_exhaustive_budget_accounting() {
        // 50-round episodes: every copy stays within its slice, the total never
        // exceeds B, and once nothing can fire the reported probability is 0.
        for budget in [1usize, 3, 7, 20, 50] {
            for seed in 0..40u64 {
                let c = cfg(0.0, 0.0, 1.0, Some(budget), 50);
                let mut m = MasterState::new(3, &c).unwrap();
                let streams = CopyStreams::new(seed);
                let mut queries = 0;
                for t in 0..50 {
                    let a = (t as f64 * 0.71 + seed as f64).sin();
                    let x = [a, (1.0 - a * a).sqrt(), 0.0];
                    let d = fixed_budget_step(&mut m, &c, &x, t, &streams).unwrap();
                    if d.queried {
                        queries += 1;
                        m.absorb(&x, 0.5 * a).unwrap();
                    }
                    let per = m.ledger.per_copy_budget();
                    assert!(m.ledger.copies().iter().all(|cp| cp.spent <= per));
                    let live = m.ledger.copies().iter().any(|cp| cp.spent < per);
                    if !live || m.ledger.total_spent() >= budget {
                        assert_eq!(d.query_prob, 0.0);
                    }
                }
                assert!(queries <= budget);
                assert_eq!(queries, m.ledger.total_spent());
            }
        }
    }

    #[test]
    fn copy_streams_are_order_independent() {
        let s = CopyStreams::new(99);
        let a = s.uniform(17, 3);
        let _ = s.uniform(17, 4);
        assert_eq!(a, s.uniform(17, 3));
        assert_ne!(a, s.uniform(18, 3));
        assert_ne!(a, s.uniform(17, 2));
    }

    #[test]
    fn oracle_rates_examples() {
        let mu: Vec<f64> = oracle_rates(&[(4, 4), (1, 100)], 6).unwrap();
        assert_abs_diff_eq!(mu[0], 3.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[1], 3.0 / 70.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[0] * 4.0 + mu[1] * 100.0, 6.0, epsilon = 1e-9);

        let full: Vec<f64> = oracle_rates(&[(4, 4), (1, 100)], 104).unwrap();
        assert_eq!(full, vec![1.0, 1.0]);
        let none: Vec<f64> = oracle_rates(&[(4, 4), (1, 100)], 0).unwrap();
        assert_eq!(none, vec![0.0, 0.0]);
        assert!(oracle_rates::<f64>(&[], 3).is_err());
    }

    #[test]
    fn oracle_rates_saturate_small_domains() {
        // C* would push μ₀ above 1, so domain 0 saturates and the rest share the remainder.
        let mu: Vec<f64> = oracle_rates(&[(4, 4), (1, 100)], 20).unwrap();
        assert_eq!(mu[0], 1.0);
        assert_abs_diff_eq!(mu[1], 0.16, epsilon = 1e-12);
    }
}
