use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{stream_hash, GroundTruth, StreamRound};
use crate::error::{Error, Result};
use crate::kernel::{kernel_qufur_step, KernelFunction, KernelState};
use crate::linalg::{dot, RlsState};
use crate::nonlinear::{
    nonlinear_master_step, nonlinear_qufur_step, HypothesisTable, NonlinearLearner,
    NonlinearMaster,
};
use crate::policy::{
    bernoulli_query, fixed_budget_step, oracle_rates, predict, qufur_step, uncertainty,
    CopyStreams, MasterState, PolicyConfig, RoundDecision,
};

use super::metrics::{compute_regret, cost_from};

/// A materialized stream plus what the harness knows about it.
#[derive(Clone, Debug)]
pub struct Environment {
    pub rounds: Vec<StreamRound>,
    pub truth: Option<GroundTruth>,
    pub dim: usize,
    pub table: Option<Arc<HypothesisTable<f64>>>,
    pub stream_hash: String,
}

impl Environment {
    pub fn new(
        rounds: Vec<StreamRound>,
        truth: Option<GroundTruth>,
        table: Option<Arc<HypothesisTable<f64>>>,
    ) -> Result<Self> {
        let dim = rounds
            .first()
            .map(|r| r.x.len())
            .ok_or_else(|| Error::config("environment", "stream has no rounds"))?;
        for r in &rounds {
            if r.x.len() != dim {
                return Err(Error::config(
                    "environment",
                    format!("round {} has dimension {}, expected {dim}", r.t, r.x.len()),
                ));
            }
        }
        let stream_hash = stream_hash(&rounds);
        Ok(Self {
            rounds,
            truth,
            dim,
            table,
            stream_hash,
        })
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    /// `(domain id, (d_u, T_u))` with `d_u` the numerical rank of the
    /// domain's inputs and `T_u` its round count.
    pub fn domain_profile(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut bases: BTreeMap<usize, (Vec<Vec<f64>>, usize)> = BTreeMap::new();
        for r in &self.rounds {
            let (basis, count) = bases.entry(r.domain_id).or_default();
            *count += 1;
            if basis.len() < self.dim {
                let scale = dot(&r.x, &r.x).sqrt().max(1.0);
                let mut v = r.x.clone();
                for q in basis.iter() {
                    let c = dot(&v, q);
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
                }
                let norm = dot(&v, &v).sqrt();
                if norm > 1e-9 * scale {
                    basis.push(v.into_iter().map(|c| c / norm).collect());
                }
            }
        }
        bases
            .into_iter()
            .map(|(u, (basis, count))| (u, (basis.len().max(1), count)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Qufur,
    FixedBudget,
    Uniform,
    Greedy,
    Oracle,
    KernelQufur,
    Nonlinear,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Qufur => "qufur",
            PolicyKind::FixedBudget => "fixed_budget",
            PolicyKind::Uniform => "uniform",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Oracle => "oracle",
            PolicyKind::KernelQufur => "kernel_qufur",
            PolicyKind::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A policy and its parameters. Unset fields fall back to
/// [`EpisodeSettings`].
///
/// `nonlinear` runs QuFUR(α) when `alpha` is set and the fixed-budget
/// master otherwise. `uniform` without `mu` uses `B/T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelFunction<f64>>,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            alpha: None,
            budget: None,
            mu: None,
            norm_bound: None,
            eta: None,
            delta: None,
            kernel: None,
        }
    }

    pub fn qufur(alpha: f64) -> Self {
        Self::new(PolicyKind::Qufur).with_alpha(alpha)
    }

    pub fn fixed_budget(budget: usize) -> Self {
        Self::new(PolicyKind::FixedBudget).with_budget(budget)
    }

    pub fn uniform(mu: f64) -> Self {
        Self {
            mu: Some(mu),
            ..Self::new(PolicyKind::Uniform)
        }
    }

    pub fn greedy() -> Self {
        Self::new(PolicyKind::Greedy)
    }

    pub fn oracle(budget: usize) -> Self {
        Self::new(PolicyKind::Oracle).with_budget(budget)
    }

    pub fn kernel_qufur(alpha: f64, kernel: KernelFunction<f64>) -> Self {
        Self {
            kernel: Some(kernel),
            ..Self::new(PolicyKind::KernelQufur).with_alpha(alpha)
        }
    }

    pub fn nonlinear(alpha: f64) -> Self {
        Self::new(PolicyKind::Nonlinear).with_alpha(alpha)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn with_norm_bound(mut self, c: f64) -> Self {
        self.norm_bound = Some(c);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    /// The parameter a sweep reports when none is varied.
    pub fn primary_param(&self) -> (&'static str, f64) {
        let budget = self.budget.map(|b| ("budget", b as f64));
        let alpha = self.alpha.map(|a| ("alpha", a));
        let found = match self.kind {
            PolicyKind::Qufur | PolicyKind::KernelQufur => alpha.or(budget),
            PolicyKind::FixedBudget | PolicyKind::Oracle | PolicyKind::Greedy => budget,
            PolicyKind::Uniform => self.mu.map(|m| ("mu", m)).or(budget),
            PolicyKind::Nonlinear => alpha.or(budget),
        };
        found.unwrap_or(("none", 0.0))
    }

    /// Checks the fields the kind needs.
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, field: &str, message: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, message.to_string()))
            }
        };
        if let Some(a) = self.alpha {
            need(a >= 0.0 && a.is_finite(), "alpha", "must be finite and non-negative")?;
        }
        if let Some(m) = self.mu {
            need((0.0..=1.0).contains(&m), "mu", "must lie in [0, 1]")?;
        }
        if let Some(c) = self.norm_bound {
            need(c > 0.0 && c.is_finite(), "norm_bound", "must be positive")?;
        }
        if let Some(e) = self.eta {
            need(e >= 0.0 && e.is_finite(), "eta", "must be finite and non-negative")?;
        }
        if let Some(d) = self.delta {
            need(d > 0.0 && d < 1.0, "delta", "must lie in (0, 1)")?;
        }
        match self.kind {
            PolicyKind::Qufur => need(self.alpha.is_some(), "alpha", "qufur needs alpha"),
            PolicyKind::KernelQufur => {
                need(self.alpha.is_some(), "alpha", "kernel_qufur needs alpha")?;
                need(self.kernel.is_some(), "kernel", "kernel_qufur needs a kernel")
            }
            PolicyKind::FixedBudget | PolicyKind::Oracle => {
                need(self.budget.is_some(), "budget", "this policy needs a budget")
            }
            PolicyKind::Uniform => need(
                self.mu.is_some() || self.budget.is_some(),
                "mu",
                "uniform needs mu or a budget",
            ),
            PolicyKind::Greedy => Ok(()),
            PolicyKind::Nonlinear => need(
                self.alpha.is_some() || self.budget.is_some(),
                "alpha",
                "nonlinear needs alpha or a budget",
            ),
        }
    }
}

/// Defaults shared by every policy of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub norm_bound: f64,
    pub eta: f64,
    pub delta: f64,
    pub cost_c: f64,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            norm_bound: 1.0,
            eta: 1.0,
            delta: 0.1,
            cost_c: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub domain_id: usize,
    pub prediction: f64,
    pub delta: f64,
    pub query_prob: f64,
    pub queried: bool,
    /// `(ŷ_t − y_t)²`.
    pub loss: f64,
    /// `‖x_t‖²_{M_t⁻¹}` before the round's update, for ridge-based policies.
    pub quad_form: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub queries: usize,
    pub regret_r: Option<f64>,
    pub regret_reg: f64,
    /// `Σ (ŷ_t − y_t)²` over all rounds.
    pub total_loss: f64,
    pub cost_w: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub policy_name: String,
    pub policy: PolicySpec,
    pub settings: EpisodeSettings,
    pub seed: u64,
    pub stream_hash: String,
    pub rounds: Vec<RoundRecord>,
    pub totals: Totals,
}

struct Resolved {
    cfg: PolicyConfig<f64>,
    delta: f64,
}

fn resolve(policy: &PolicySpec, settings: &EpisodeSettings, horizon: usize) -> Result<Resolved> {
    let cfg = PolicyConfig::new(
        policy.alpha.unwrap_or(0.0),
        policy.eta.unwrap_or(settings.eta),
        policy.norm_bound.unwrap_or(settings.norm_bound),
        policy.budget,
        horizon,
    )
    .map_err(|e| Error::config("policy", e.to_string()))?;
    Ok(Resolved {
        cfg,
        delta: policy.delta.unwrap_or(settings.delta),
    })
}

enum Rate {
    Constant(f64),
    PerDomain(BTreeMap<usize, f64>),
}

enum Learner {
    Qufur {
        rls: RlsState<f64>,
        rng: ChaCha8Rng,
    },
    Master {
        master: MasterState<f64>,
        streams: CopyStreams,
    },
    Fixed {
        rls: RlsState<f64>,
        rate: Rate,
        rng: ChaCha8Rng,
    },
    Kernel {
        state: KernelState<f64>,
        rng: ChaCha8Rng,
    },
    Nonlinear {
        learner: NonlinearLearner<f64>,
        rng: ChaCha8Rng,
    },
    NonlinearMaster {
        master: NonlinearMaster<f64>,
        streams: CopyStreams,
    },
}

impl Learner {
    fn build(env: &Environment, policy: &PolicySpec, r: &Resolved, seed: u64) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &r.cfg;
        let horizon = cfg.horizon;
        let rls = || RlsState::new(env.dim, cfg.norm_bound);
        Ok(match policy.kind {
            PolicyKind::Qufur => Learner::Qufur { rls: rls()?, rng },
            PolicyKind::FixedBudget => Learner::Master {
                master: MasterState::new(env.dim, cfg)?,
                streams: CopyStreams::new(seed),
            },
            PolicyKind::Uniform => {
                let mu = match (policy.mu, cfg.effective_budget()) {
                    (Some(mu), _) => mu,
                    (None, Some(b)) => b as f64 / horizon as f64,
                    (None, None) => return Err(Error::config("mu", "uniform needs mu or a budget")),
                };
                Learner::Fixed {
                    rls: rls()?,
                    rate: Rate::Constant(mu),
                    rng,
                }
            }
            PolicyKind::Greedy => Learner::Fixed {
                rls: rls()?,
                rate: Rate::Constant(1.0),
                rng,
            },
            PolicyKind::Oracle => {
                let budget = cfg
                    .effective_budget()
                    .ok_or_else(|| Error::config("budget", "oracle needs a budget"))?;
                let profile = env.domain_profile();
                let pairs: Vec<(usize, usize)> = profile.values().copied().collect();
                let rates = oracle_rates::<f64>(&pairs, budget)?;
                Learner::Fixed {
                    rls: rls()?,
                    rate: Rate::PerDomain(profile.keys().copied().zip(rates).collect()),
                    rng,
                }
            }
            PolicyKind::KernelQufur => {
                let kernel = policy
                    .kernel
                    .ok_or_else(|| Error::config("kernel", "kernel_qufur needs a kernel"))?;
                Learner::Kernel {
                    state: KernelState::new(kernel, cfg.norm_bound)?,
                    rng,
                }
            }
            PolicyKind::Nonlinear => {
                let table = env.table.clone().ok_or_else(|| {
                    Error::config("environment", "nonlinear policies need a hypothesis table")
                })?;
                for round in &env.rounds {
                    match round.support_id {
                        Some(id) if id < table.support_size() => {}
                        _ => {
                            return Err(Error::config(
                                "environment",
                                format!("round {} has no valid support id", round.t),
                            ))
                        }
                    }
                }
                if policy.alpha.is_some() {
                    Learner::Nonlinear {
                        learner: NonlinearLearner::new(table, r.delta, horizon)?,
                        rng,
                    }
                } else {
                    Learner::NonlinearMaster {
                        master: NonlinearMaster::new(table, cfg, r.delta)?,
                        streams: CopyStreams::new(seed),
                    }
                }
            }
        })
    }

    /// Decision for the round plus `‖x‖²_{M⁻¹}` where it exists. Uses
    /// only the pre-round state and `x` (or its support id).
    fn decide(
        &mut self,
        cfg: &PolicyConfig<f64>,
        index: usize,
        round: &StreamRound,
    ) -> Result<(RoundDecision<f64>, Option<f64>)> {
        let x = &round.x;
        match self {
            Learner::Qufur { rls, rng } => {
                Ok((qufur_step(rls, cfg, x, rng)?, Some(rls.quad_form(x)?)))
            }
            Learner::Master { master, streams } => Ok((
                fixed_budget_step(master, cfg, x, index, streams)?,
                Some(master.shared_rls.quad_form(x)?),
            )),
            Learner::Fixed { rls, rate, rng } => {
                let p = match rate {
                    Rate::Constant(p) => *p,
                    Rate::PerDomain(map) => map.get(&round.domain_id).copied().unwrap_or(0.0),
                };
                let remaining = cfg
                    .effective_budget()
                    .map_or(usize::MAX, |b| b.saturating_sub(rls.query_count()));
                let query_prob = if remaining == 0 { 0.0 } else { p };
                let decision = RoundDecision {
                    prediction: predict(rls, x)?,
                    delta: uncertainty(rls, x, cfg.noise_level)?,
                    query_prob,
                    queried: bernoulli_query(p, remaining, rng)?,
                };
                Ok((decision, Some(rls.quad_form(x)?)))
            }
            Learner::Kernel { state, rng } => Ok((
                kernel_qufur_step(state, cfg, x, rng)?,
                Some(state.posterior_norm(x)?),
            )),
            Learner::Nonlinear { learner, rng } => {
                let id = round.support_id.expect("support ids checked at build");
                Ok((nonlinear_qufur_step(learner, cfg, id, rng)?, None))
            }
            Learner::NonlinearMaster { master, streams } => {
                let id = round.support_id.expect("support ids checked at build");
                Ok((nonlinear_master_step(master, cfg, id, index, streams)?, None))
            }
        }
    }

    fn absorb(&mut self, round: &StreamRound) -> Result<()> {
        let (x, y) = (&round.x, round.label);
        match self {
            Learner::Qufur { rls, .. } | Learner::Fixed { rls, .. } => rls.absorb(x, y),
            Learner::Master { master, .. } => master.absorb(x, y),
            Learner::Kernel { state, .. } => state.absorb(x, y),
            Learner::Nonlinear { learner, .. } => {
                learner.absorb(round.support_id.expect("checked"), y)
            }
            Learner::NonlinearMaster { master, .. } => {
                master.learner.absorb(round.support_id.expect("checked"), y)
            }
        }
    }
}

/// Runs one episode in protocol order: reveal `x`, predict, record the
/// loss, decide whether to query, and absorb the label only if queried.
pub fn run_episode(
    env: &Environment,
    policy: &PolicySpec,
    settings: &EpisodeSettings,
    seed: u64,
) -> Result<EpisodeLog> {
    policy.validate()?;
    let resolved = resolve(policy, settings, env.horizon())?;
    let mut learner = Learner::build(env, policy, &resolved, seed)?;
    let mut records = Vec::with_capacity(env.horizon());
    for (index, round) in env.rounds.iter().enumerate() {
        let (decision, quad_form) = learner.decide(&resolved.cfg, index, round)?;
        let err = decision.prediction - round.label;
        records.push(RoundRecord {
            t: round.t,
            domain_id: round.domain_id,
            prediction: decision.prediction,
            delta: decision.delta,
            query_prob: decision.query_prob,
            queried: decision.queried,
            loss: err * err,
            quad_form,
        });
        if decision.queried {
            learner.absorb(round)?;
        }
    }

    let mut log = EpisodeLog {
        policy_name: policy.kind.name().to_string(),
        policy: policy.clone(),
        settings: *settings,
        seed,
        stream_hash: env.stream_hash.clone(),
        rounds: records,
        totals: Totals {
            queries: 0,
            regret_r: None,
            regret_reg: 0.0,
            total_loss: 0.0,
            cost_w: None,
        },
    };
    let (regret_r, regret_reg) = compute_regret(&log, env)?;
    log.totals = Totals {
        queries: log.rounds.iter().filter(|r| r.queried).count(),
        regret_r,
        regret_reg,
        total_loss: log.rounds.iter().map(|r| r.loss).sum(),
        cost_w: None,
    };
    log.totals.cost_w = regret_r.map(|r| cost_from(r, log.totals.queries, settings.cost_c));
    Ok(log)
}
