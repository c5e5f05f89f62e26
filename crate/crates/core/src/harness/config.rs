use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{
    lower_bound_stream, replay_stream, synthetic_stream, table_stream, DomainOrdering, DomainSpec,
};
use crate::error::{Error, Result};
use crate::nonlinear::HypothesisTable;

use super::episode::{Environment, EpisodeSettings, PolicySpec};
use super::seeds::environment_seed;

/// Where the rounds come from. Domains are `[d_u, T_u]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Synthetic {
        domains: Vec<(usize, usize)>,
        #[serde(default)]
        ordering: DomainOrdering,
        /// Defaults to `Σ d_u`.
        #[serde(default)]
        ambient_dim: Option<usize>,
        eta: f64,
    },
    LowerBound {
        domains: Vec<(usize, usize)>,
    },
    Replay {
        path: PathBuf,
    },
    /// Inputs drawn from the support of a finite hypothesis class.
    Table {
        class: PathBuf,
        domains: Vec<(usize, usize)>,
        #[serde(default)]
        ordering: DomainOrdering,
        eta: f64,
    },
}

/// One policy template and the values of its varied parameter, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrid {
    pub template: PolicySpec,
    pub param_name: String,
    pub values: Vec<f64>,
}

impl PolicyGrid {
    /// Concrete policies with their reported `(param_name, param_value)`.
    pub fn cells(&self) -> Vec<(PolicySpec, String, f64)> {
        if self.values.is_empty() {
            let (name, value) = self.template.primary_param();
            return vec![(self.template.clone(), name.to_string(), value)];
        }
        self.values
            .iter()
            .map(|&v| {
                let mut spec = self.template.clone();
                match self.param_name.as_str() {
                    "alpha" => spec.alpha = Some(v),
                    "budget" => spec.budget = Some(v as usize),
                    "mu" => spec.mu = Some(v),
                    "norm_bound" => spec.norm_bound = Some(v),
                    "eta" => spec.eta = Some(v),
                    "delta" => spec.delta = Some(v),
                    other => unreachable!("grid over unsupported field {other}"),
                }
                (spec, self.param_name.clone(), v)
            })
            .collect()
    }

    fn parse(value: &Value, field: &str) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config(field, "expected an object"))?;
        let grids: Vec<(&String, &Vec<Value>)> = obj
            .iter()
            .filter_map(|(k, v)| v.as_array().map(|a| (k, a)))
            .collect();
        if grids.len() > 1 {
            return Err(Error::config(field, "at most one parameter may be a list"));
        }
        let Some((name, items)) = grids.first().copied() else {
            let template: PolicySpec = serde_json::from_value(value.clone())
                .map_err(|e| Error::config(field, e.to_string()))?;
            template.validate()?;
            return Ok(Self {
                template,
                param_name: String::new(),
                values: Vec::new(),
            });
        };
        let grid_field = format!("{field}.{name}");
        if !["alpha", "budget", "mu", "norm_bound", "eta", "delta"].contains(&name.as_str()) {
            return Err(Error::config(grid_field, "this parameter cannot be swept"));
        }
        if items.is_empty() {
            return Err(Error::config(grid_field, "grid is empty"));
        }
        let mut values = Vec::with_capacity(items.len());
        let mut template = None;
        for item in items {
            let mut single = obj.clone();
            single.insert(name.clone(), item.clone());
            let spec: PolicySpec = serde_json::from_value(Value::Object(single))
                .map_err(|e| Error::config(&grid_field, e.to_string()))?;
            spec.validate()?;
            values.push(
                item.as_f64()
                    .ok_or_else(|| Error::config(&grid_field, "grid values must be numbers"))?,
            );
            template.get_or_insert(spec);
        }
        Ok(Self {
            template: template.expect("grid is non-empty"),
            param_name: name.clone(),
            values,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    environment: EnvironmentConfig,
    #[serde(default)]
    policy: Option<Value>,
    #[serde(default)]
    policies: Option<Vec<Value>>,
    #[serde(default)]
    horizon: Option<usize>,
    #[serde(default = "one")]
    seeds: usize,
    #[serde(default)]
    base_seed: u64,
    #[serde(default = "unit")]
    cost_c: f64,
    #[serde(default)]
    norm_bound: Option<f64>,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

/// A validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub policies: Vec<PolicyGrid>,
    pub horizon: Option<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub cost_c: f64,
    pub norm_bound: Option<f64>,
    pub eta: Option<f64>,
    pub delta: Option<f64>,
    /// Relative paths in the environment resolve against this directory.
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, base)
    }

    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let mut policies = Vec::new();
        match (&raw.policy, &raw.policies) {
            (Some(_), Some(_)) => {
                return Err(Error::config("policies", "give either `policy` or `policies`"))
            }
            (None, None) => return Err(Error::config("policy", "no policy given")),
            (Some(p), None) => policies.push(PolicyGrid::parse(p, "policy")?),
            (None, Some(ps)) => {
                if ps.is_empty() {
                    return Err(Error::config("policies", "list is empty"));
                }
                for (i, p) in ps.iter().enumerate() {
                    policies.push(PolicyGrid::parse(p, &format!("policies[{i}]"))?);
                }
            }
        }
        let cfg = Self {
            environment: raw.environment,
            policies,
            horizon: raw.horizon,
            seeds: raw.seeds,
            base_seed: raw.base_seed,
            cost_c: raw.cost_c,
            norm_bound: raw.norm_bound,
            eta: raw.eta,
            delta: raw.delta,
            base_dir: base_dir.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be at least 1"));
        }
        if !(self.cost_c >= 0.0) || !self.cost_c.is_finite() {
            return Err(Error::config("cost_c", "must be finite and non-negative"));
        }
        if let Some(c) = self.norm_bound {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("norm_bound", "must be positive"));
            }
        }
        if let Some(e) = self.eta {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::config("eta", "must be finite and non-negative"));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("delta", "must lie in (0, 1)"));
            }
        }
        match &self.environment {
            EnvironmentConfig::Synthetic {
                domains,
                ambient_dim,
                eta,
                ..
            } => {
                domain_spec(domains, DomainOrdering::Sequential)?;
                let need: usize = domains.iter().map(|d| d.0).sum();
                if ambient_dim.is_some_and(|a| a < need) {
                    return Err(Error::config(
                        "environment.ambient_dim",
                        format!("domains need {need} dimensions"),
                    ));
                }
                if !(*eta >= 0.0) || !eta.is_finite() {
                    return Err(Error::config("environment.eta", "must be finite and non-negative"));
                }
            }
            EnvironmentConfig::LowerBound { domains } => {
                domain_spec(domains, DomainOrdering::Sequential)?;
            }
            EnvironmentConfig::Table { domains, eta, .. } => {
                domain_spec(domains, DomainOrdering::Sequential)?;
                if !(*eta >= 0.0) || !eta.is_finite() {
                    return Err(Error::config("environment.eta", "must be finite and non-negative"));
                }
            }
            EnvironmentConfig::Replay { .. } => {}
        }
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The stream for one seed index; replay streams ignore the index.
    pub fn environment(&self, seed_index: usize) -> Result<Environment> {
        let seed = environment_seed(self.base_seed, seed_index);
        let env = match &self.environment {
            EnvironmentConfig::Synthetic {
                domains,
                ordering,
                ambient_dim,
                eta,
            } => {
                let spec = domain_spec(domains, *ordering)?;
                let dim = ambient_dim.unwrap_or(spec.total_dim());
                let (truth, rounds) = synthetic_stream(&spec, dim, *eta, seed)?;
                Environment::new(rounds, Some(truth), None)?
            }
            EnvironmentConfig::LowerBound { domains } => {
                let spec = domain_spec(domains, DomainOrdering::Sequential)?;
                let (truth, rounds) = lower_bound_stream(&spec, seed)?;
                Environment::new(rounds, Some(truth), None)?
            }
            EnvironmentConfig::Replay { path } => {
                let replay = replay_stream(self.resolve(path))?;
                Environment::new(replay.rounds, None, None)?
            }
            EnvironmentConfig::Table {
                class,
                domains,
                ordering,
                eta,
            } => {
                let table = HypothesisTable::load(self.resolve(class))?;
                let spec = domain_spec(domains, *ordering)?;
                let (truth, rounds) = table_stream(&spec, &table, *eta, seed)?;
                Environment::new(rounds, Some(truth), Some(Arc::new(table)))?
            }
        };
        if let Some(h) = self.horizon {
            if h != env.horizon() {
                return Err(Error::config(
                    "horizon",
                    format!("{h} does not match the stream length {}", env.horizon()),
                ));
            }
        }
        Ok(env)
    }

    /// Policy defaults: explicit values first, then the environment's own
    /// noise level and norm bound.
    pub fn settings(&self, env: &Environment) -> EpisodeSettings {
        let (eta, norm_bound) = match &self.environment {
            EnvironmentConfig::Synthetic { eta, .. } | EnvironmentConfig::Table { eta, .. } => {
                (*eta, 1.0)
            }
            EnvironmentConfig::LowerBound { .. } => (1.0, (env.dim as f64).sqrt()),
            EnvironmentConfig::Replay { .. } => (1.0, 1.0),
        };
        EpisodeSettings {
            norm_bound: self.norm_bound.unwrap_or(norm_bound),
            eta: self.eta.unwrap_or(eta),
            delta: self.delta.unwrap_or(0.1),
            cost_c: self.cost_c,
        }
    }
}

fn domain_spec(domains: &[(usize, usize)], ordering: DomainOrdering) -> Result<DomainSpec> {
    DomainSpec::new(domains, ordering).map_err(|e| Error::config("environment.domains", e.to_string()))
}
