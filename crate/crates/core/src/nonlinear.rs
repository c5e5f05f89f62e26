//! QuFUR over finite hypothesis classes.
//!
//! A class is a value table `values[f][x]` over a finite support. Each round
//! the learner predicts with the empirical risk minimizer, forms the
//! confidence set of hypotheses within `β_{|Q|}` (in squared distance on the
//! queried points) of it, and queries with probability `min(1, α Δ)` where
//! `Δ` is the squared width of that set at the current input.
//!
//! The eluder-dimension and covering-number routines are exhaustive and are
//! meant for small classes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    bernoulli_query, general_master_copy_exponent, geometric_alphas, query_probability,
    BudgetLedger, CopyStreams, PolicyConfig, RoundDecision,
};
use crate::scalar::Scalar;

/// Largest support subset accepted by [`eluder_dimension`].
pub const ELUDER_MAX_SUPPORT: usize = 8;
/// Largest class accepted by [`eluder_dimension`].
pub const ELUDER_MAX_CLASS: usize = 64;
/// Memoized search states explored by [`eluder_dimension`] before giving up.
pub const ELUDER_MAX_STATES: usize = 1 << 21;

/// Finite class `F = {f : X → [−1, 1]}` stored as a value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTable<T> {
    #[serde(deserialize_with = "support_ids")]
    pub support: Vec<String>,
    pub values: Vec<Vec<T>>,
    #[serde(default)]
    pub truth_index: Option<usize>,
}

fn support_ids<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<String>, D::Error> {
    let raw = Vec::<serde_json::Value>::deserialize(de)?;
    Ok(raw
        .into_iter()
        .map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        })
        .collect())
}

impl<T: Scalar> HypothesisTable<T> {
    pub fn new(support: Vec<String>, values: Vec<Vec<T>>, truth_index: Option<usize>) -> Result<Self> {
        let table = Self {
            support,
            values,
            truth_index,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::invalid("hypothesis table has an empty support"));
        }
        if self.values.is_empty() {
            return Err(Error::invalid("hypothesis table has no hypotheses"));
        }
        let n = self.support.len();
        for (f, row) in self.values.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!(
                    "hypothesis {f} has {} values, support has {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(v.abs() <= T::one())) {
                return Err(Error::invalid(format!(
                    "hypothesis {f} has a value outside [-1, 1]"
                )));
            }
        }
        if let Some(t) = self.truth_index {
            if t >= self.values.len() {
                return Err(Error::invalid(format!("truth_index {t} is out of range")));
            }
        }
        Ok(())
    }

    pub fn num_hypotheses(&self) -> usize {
        self.values.len()
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    #[inline]
    pub fn value(&self, f: usize, x: usize) -> T {
        self.values[f][x]
    }

    fn check_point(&self, x: usize) -> Result<()> {
        if x >= self.support.len() {
            return Err(Error::invalid(format!(
                "support id {x} out of range (support has {} points)",
                self.support.len()
            )));
        }
        Ok(())
    }
}

impl HypothesisTable<f64> {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Hypotheses within the current threshold of the ERM center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet<T> {
    pub member_indices: Vec<usize>,
    pub center_index: usize,
    pub threshold: T,
}

impl<T> ConfidenceSet<T> {
    pub fn contains(&self, f: usize) -> bool {
        self.member_indices.binary_search(&f).is_ok()
    }
}

/// Squared-loss minimizer over the labeled points, lowest index on ties.
pub fn erm<T: Scalar>(table: &HypothesisTable<T>, labeled: &[(usize, T)]) -> Result<usize> {
    if table.values.is_empty() {
        return Err(Error::invalid("hypothesis table is empty"));
    }
    for &(x, _) in labeled {
        table.check_point(x)?;
    }
    let mut best = 0;
    let mut best_loss = T::infinity();
    for (f, row) in table.values.iter().enumerate() {
        let loss = labeled
            .iter()
            .fold(T::zero(), |acc, &(x, y)| acc + (row[x] - y) * (row[x] - y));
        if loss < best_loss {
            best = f;
            best_loss = loss;
        }
    }
    Ok(best)
}

/// `β_k = 8η² ln(4N/δ) + (2k/T²)(16 + √(2η² ln(16k²/δ)))`, natural logs.
pub fn beta_threshold<T: Scalar>(
    k: usize,
    horizon: usize,
    eta: T,
    delta: T,
    cover_size: usize,
) -> Result<T> {
    if !(delta > T::zero() && delta < T::one()) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if cover_size == 0 {
        return Err(Error::invalid("cover size must be at least 1"));
    }
    let eta2 = eta * eta;
    let four = T::of(4.0);
    let eight = T::of(8.0);
    let cover_term = eight * eta2 * (four * T::of_usize(cover_size) / delta).ln();
    if k == 0 {
        return Ok(cover_term);
    }
    let kf = T::of_usize(k);
    let t2 = T::of_usize(horizon) * T::of_usize(horizon);
    let two = T::of(2.0);
    let log_term = (T::of(16.0) * kf * kf / delta).ln();
    Ok(cover_term + two * kf / t2 * (T::of(16.0) + (two * eta2 * log_term).sqrt()))
}

/// All hypotheses whose squared distance to `center` on the labeled inputs
/// is at most `threshold`.
pub fn confidence_set<T: Scalar>(
    table: &HypothesisTable<T>,
    center: usize,
    labeled: &[(usize, T)],
    threshold: T,
) -> Result<ConfidenceSet<T>> {
    if center >= table.num_hypotheses() {
        return Err(Error::invalid(format!("center {center} is out of range")));
    }
    for &(x, _) in labeled {
        table.check_point(x)?;
    }
    let c = &table.values[center];
    let member_indices = table
        .values
        .iter()
        .enumerate()
        .filter(|(f, row)| {
            *f == center || {
                let dist = labeled
                    .iter()
                    .fold(T::zero(), |acc, &(x, _)| acc + (row[x] - c[x]) * (row[x] - c[x]));
                dist <= threshold
            }
        })
        .map(|(f, _)| f)
        .collect();
    Ok(ConfidenceSet {
        member_indices,
        center_index: center,
        threshold,
    })
}

/// `sup_{f1,f2 ∈ set} |f1(x) − f2(x)|²`, i.e. the squared range at `x`.
pub fn disagreement<T: Scalar>(
    table: &HypothesisTable<T>,
    set: &ConfidenceSet<T>,
    x: usize,
) -> Result<T> {
    table.check_point(x)?;
    let mut it = set.member_indices.iter().map(|&f| table.value(f, x));
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidState("confidence set is empty".into()))?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok((hi - lo) * (hi - lo))
}

/// Size of a greedy internal ε-cover in sup norm over the support.
pub fn covering_number<T: Scalar>(table: &HypothesisTable<T>, epsilon: T) -> usize {
    let mut centers: Vec<usize> = Vec::new();
    for (f, row) in table.values.iter().enumerate() {
        let covered = centers.iter().any(|&c| sup_distance(row, &table.values[c]) <= epsilon);
        if !covered {
            centers.push(f);
        }
    }
    centers.len()
}

pub(crate) fn sup_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()))
}

/// Longest sequence over `support_subset` (repetition allowed) in which,
/// for some `ε' > ε`, every element is ε'-independent of its predecessors.
pub fn eluder_dimension<T: Scalar>(
    table: &HypothesisTable<T>,
    support_subset: &[usize],
    epsilon: T,
) -> Result<usize> {
    if support_subset.len() > ELUDER_MAX_SUPPORT || table.num_hypotheses() > ELUDER_MAX_CLASS {
        return Err(Error::ResourceLimit(format!(
            "exhaustive eluder search is limited to {ELUDER_MAX_SUPPORT} points and \
             {ELUDER_MAX_CLASS} hypotheses"
        )));
    }
    if !(epsilon > T::zero()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    for &x in support_subset {
        table.check_point(x)?;
    }

    let eps = epsilon.as_f64();
    let nf = table.num_hypotheses();
    let mut gaps: Vec<Vec<f64>> = Vec::new();
    for a in 0..nf {
        for b in (a + 1)..nf {
            let g: Vec<f64> = support_subset
                .iter()
                .map(|&x| (table.value(a, x) - table.value(b, x)).abs().as_f64())
                .collect();
            if g.iter().any(|v| *v > eps) {
                gaps.push(g);
            }
        }
    }
    if gaps.is_empty() {
        return Ok(0);
    }

    let mut levels: Vec<f64> = gaps.iter().flatten().copied().filter(|g| *g > eps).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("gaps are finite"));
    levels.dedup();

    // The gap test `g > ε'` only changes at the gap levels, while the
    // distance test `dist ≤ ε'` loosens as ε' grows, so the best ε' in each
    // band sits just below the next level. Midpoints and the levels
    // themselves are tried as well.
    let mut candidates = Vec::new();
    let mut prev = eps;
    for &g in &levels {
        candidates.push(0.5 * (prev + g));
        candidates.push(g);
        let below = g - (1e-9 * g.max(1.0)).min(0.5 * (g - eps));
        if below > eps {
            candidates.push(below);
        }
        prev = g;
    }

    let mut best = 0;
    for eps_prime in candidates {
        best = best.max(longest_independent_sequence(&gaps, support_subset.len(), eps_prime)?);
    }
    Ok(best)
}

fn longest_independent_sequence(gaps: &[Vec<f64>], points: usize, eps_prime: f64) -> Result<usize> {
    let limit = eps_prime * eps_prime;
    let mut memo: HashMap<Vec<u16>, usize> = HashMap::new();
    let mut counts = vec![0u16; points];
    search(gaps, eps_prime, limit, &mut counts, &mut memo)
}

fn search(
    gaps: &[Vec<f64>],
    eps_prime: f64,
    limit: f64,
    counts: &mut Vec<u16>,
    memo: &mut HashMap<Vec<u16>, usize>,
) -> Result<usize> {
    if let Some(&v) = memo.get(counts.as_slice()) {
        return Ok(v);
    }
    if memo.len() >= ELUDER_MAX_STATES {
        return Err(Error::ResourceLimit(
            "eluder search exceeded its state budget".into(),
        ));
    }
    // Pairs still close enough on the current multiset of predecessors.
    let close: Vec<&Vec<f64>> = gaps
        .iter()
        .filter(|g| {
            let dist: f64 = g
                .iter()
                .zip(counts.iter())
                .map(|(gap, &c)| c as f64 * gap * gap)
                .sum();
            dist <= limit
        })
        .collect();
    let mut best = 0;
    for j in 0..counts.len() {
        let independent = close.iter().any(|g| g[j] > eps_prime);
        if independent {
            counts[j] += 1;
            let len = 1 + search(gaps, eps_prime, limit, counts, memo)?;
            counts[j] -= 1;
            best = best.max(len);
        }
    }
    memo.insert(counts.clone(), best);
    Ok(best)
}

/// Confidence-set parameters for the general-class learner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams<T> {
    pub delta: T,
    /// `N(F, 1/T², ‖·‖∞)`; greedy cover size when built by [`NonlinearLearner::new`].
    pub cover_size: usize,
}

/// ERM learner over a finite class, fed only queried labels.
#[derive(Clone, Debug)]
pub struct NonlinearLearner<T> {
    table: Arc<HypothesisTable<T>>,
    labeled: Vec<(usize, T)>,
    params: ConfidenceParams<T>,
}

impl<T: Scalar> NonlinearLearner<T> {
    /// Computes the greedy `1/T²` cover of the class for `β`.
    pub fn new(table: Arc<HypothesisTable<T>>, delta: T, horizon: usize) -> Result<Self> {
        table.validate()?;
        if horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        let t = horizon as f64;
        let cover_size = covering_number(&table, T::of(1.0 / (t * t)));
        // Validates delta.
        beta_threshold(0, horizon, T::zero(), delta, cover_size)?;
        Ok(Self {
            table,
            labeled: Vec::new(),
            params: ConfidenceParams { delta, cover_size },
        })
    }

    pub fn table(&self) -> &HypothesisTable<T> {
        &self.table
    }

    pub fn labeled(&self) -> &[(usize, T)] {
        &self.labeled
    }

    pub fn params(&self) -> ConfidenceParams<T> {
        self.params
    }

    pub fn query_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn center(&self) -> Result<usize> {
        erm(&self.table, &self.labeled)
    }

    /// `F_t` with threshold `β_{|Q|}`.
    pub fn confidence_set(&self, eta: T, horizon: usize) -> Result<ConfidenceSet<T>> {
        let center = self.center()?;
        let beta = beta_threshold(
            self.labeled.len(),
            horizon,
            eta,
            self.params.delta,
            self.params.cover_size,
        )?;
        confidence_set(&self.table, center, &self.labeled, beta)
    }

    /// Prediction and uncertainty at `x`.
    pub fn assess(&self, x: usize, eta: T, horizon: usize) -> Result<(T, T)> {
        self.table.check_point(x)?;
        let set = self.confidence_set(eta, horizon)?;
        let prediction = self.table.value(set.center_index, x);
        Ok((prediction, disagreement(&self.table, &set, x)?))
    }

    pub fn absorb(&mut self, x: usize, y: T) -> Result<()> {
        self.table.check_point(x)?;
        if !y.is_finite() {
            return Err(Error::invalid("label is NaN or infinite"));
        }
        self.labeled.push((x, y));
        Ok(())
    }
}

/// One round of general-class QuFUR(α); the caller absorbs on a query.
pub fn nonlinear_qufur_step<T: Scalar, R: RngCore + ?Sized>(
    learner: &NonlinearLearner<T>,
    cfg: &PolicyConfig<T>,
    x: usize,
    rng: &mut R,
) -> Result<RoundDecision<T>> {
    let (prediction, delta) = learner.assess(x, cfg.noise_level, cfg.horizon)?;
    let remaining = cfg
        .effective_budget()
        .map_or(usize::MAX, |b| b.saturating_sub(learner.query_count()));
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

/// Fixed-budget master over the general-class learner, `k = 3⌈log₂T⌉`.
#[derive(Clone, Debug)]
pub struct NonlinearMaster<T> {
    pub ledger: BudgetLedger<T>,
    pub learner: NonlinearLearner<T>,
}

impl<T: Scalar> NonlinearMaster<T> {
    pub fn new(table: Arc<HypothesisTable<T>>, cfg: &PolicyConfig<T>, delta: T) -> Result<Self> {
        let budget = cfg
            .effective_budget()
            .ok_or_else(|| Error::invalid("fixed-budget master requires a budget"))?;
        let k = general_master_copy_exponent(cfg.horizon);
        Ok(Self {
            ledger: BudgetLedger::new(geometric_alphas(k, cfg.horizon), budget)?,
            learner: NonlinearLearner::new(table, delta, cfg.horizon)?,
        })
    }
}

pub fn nonlinear_master_step<T: Scalar>(
    master: &mut NonlinearMaster<T>,
    cfg: &PolicyConfig<T>,
    x: usize,
    round: usize,
    streams: &CopyStreams,
) -> Result<RoundDecision<T>> {
    let (prediction, delta) = master.learner.assess(x, cfg.noise_level, cfg.horizon)?;
    let (query_prob, queried) = master.ledger.decide(delta, round, streams);
    Ok(RoundDecision {
        prediction,
        delta,
        query_prob,
        queried,
    })
}
