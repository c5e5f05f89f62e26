use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

use super::episode::{Environment, EpisodeLog};

/// Ridge used for the hindsight comparator; small enough to act as least
/// squares while keeping the system solvable.
const COMPARATOR_RIDGE: f64 = 1e-8;

/// `(R, Reg)` for a finished episode.
///
/// `R = Σ (ŷ_t − f*(x_t))²` needs `true_mean` on every round and is `None`
/// otherwise. `Reg = Σ (ŷ_t − y_t)² − Σ (f(x_t) − y_t)²` over every label
/// the environment drew, where `f` is `f*` when known and the best fixed
/// linear predictor in hindsight otherwise.
pub fn compute_regret(log: &EpisodeLog, env: &Environment) -> Result<(Option<f64>, f64)> {
    if log.rounds.len() != env.rounds.len() {
        return Err(Error::InvalidState(format!(
            "log has {} rounds, environment has {}",
            log.rounds.len(),
            env.rounds.len()
        )));
    }
    let means: Option<Vec<f64>> = env.rounds.iter().map(|r| r.true_mean).collect();
    let regret_r = means.as_ref().map(|m| {
        log.rounds
            .iter()
            .zip(m)
            .map(|(rec, f)| (rec.prediction - f).powi(2))
            .sum()
    });
    let comparator = match means {
        Some(m) => m,
        None => hindsight_comparator(env)?,
    };
    let regret_reg = log
        .rounds
        .iter()
        .zip(&env.rounds)
        .zip(&comparator)
        .map(|((rec, round), f)| (rec.prediction - round.label).powi(2) - (f - round.label).powi(2))
        .sum();
    Ok((regret_r, regret_reg))
}

/// Predictions of the least-squares linear fit to all of the stream's labels.
pub fn hindsight_comparator(env: &Environment) -> Result<Vec<f64>> {
    let mut gram = DenseMatrix::scaled_identity(env.dim, COMPARATOR_RIDGE);
    let mut xty = vec![0.0; env.dim];
    for r in &env.rounds {
        gram.add_outer(1.0, &r.x);
        xty.iter_mut().zip(&r.x).for_each(|(s, v)| *s += r.label * v);
    }
    let theta = gram.solve_spd(&xty)?;
    Ok(env.rounds.iter().map(|r| dot(&theta, &r.x)).collect())
}

pub(crate) fn cost_from(regret_r: f64, queries: usize, c: f64) -> f64 {
    c * regret_r + queries as f64
}

/// `W = c R + Q`.
pub fn compute_cost(log: &EpisodeLog, c: f64) -> Result<f64> {
    let r = log
        .totals
        .regret_r
        .ok_or_else(|| Error::InvalidState("regret R is unavailable for this stream".into()))?;
    Ok(cost_from(r, log.totals.queries, c))
}

/// Both sides of the per-domain elliptical-potential inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogDetCheck {
    pub domain_id: usize,
    /// `Σ_{queried t in u} min(1, ‖x_t‖²_{M_t⁻¹})`.
    pub potential: f64,
    /// `ln det(I + C² Σ_{queried t in u} x_t x_tᵀ)`.
    pub log_det: f64,
}

impl LogDetCheck {
    /// `potential ≤ factor · log_det`.
    pub fn holds_with_factor(&self, factor: f64) -> bool {
        self.potential <= factor * self.log_det
    }

    pub fn holds(&self) -> bool {
        self.holds_with_factor(1.0)
    }
}

/// Evaluates [`LogDetCheck`] for every domain with at least one query.
pub fn log_det_check(log: &EpisodeLog, env: &Environment, norm_bound: f64) -> Result<Vec<LogDetCheck>> {
    let c2 = norm_bound * norm_bound;
    let mut per_domain: BTreeMap<usize, (f64, DenseMatrix<f64>)> = BTreeMap::new();
    for (rec, round) in log.rounds.iter().zip(&env.rounds) {
        if !rec.queried {
            continue;
        }
        let q = rec.quad_form.ok_or_else(|| {
            Error::InvalidState(format!("{} does not record ‖x‖²_(M⁻¹)", log.policy_name))
        })?;
        let (potential, m) = per_domain
            .entry(rec.domain_id)
            .or_insert_with(|| (0.0, DenseMatrix::scaled_identity(env.dim, 1.0)));
        *potential += q.min(1.0);
        m.add_outer(c2, &round.x);
    }
    per_domain
        .into_iter()
        .map(|(domain_id, (potential, m))| {
            Ok(LogDetCheck {
                domain_id,
                potential,
                log_det: m.log_det_spd()?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-round CSV: `t,domain_id,prediction,delta,query_prob,queried,loss`.
pub fn write_round_log<W: Write>(writer: W, log: &EpisodeLog) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["t", "domain_id", "prediction", "delta", "query_prob", "queried", "loss"])?;
    for r in &log.rounds {
        csv.write_record([
            r.t.to_string(),
            r.domain_id.to_string(),
            r.prediction.to_string(),
            r.delta.to_string(),
            r.query_prob.to_string(),
            u8::from(r.queried).to_string(),
            r.loss.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
