use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{lower_bound_stream, DomainSpec};
use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::episode::{run_episode, Environment, EpisodeSettings, PolicySpec};
use super::metrics::mean_and_std;
use super::seeds::{environment_seed, episode_seed};

pub const SWEEP_COLUMNS: [&str; 9] = [
    "policy",
    "param_name",
    "param_value",
    "seed",
    "queries",
    "regret_R",
    "regret_Reg",
    "cost_W",
    "stream_hash",
];

const AGGREGATE_COLUMNS: [&str; 14] = [
    "policy",
    "param_name",
    "param_value",
    "seeds",
    "queries_mean",
    "queries_std",
    "regret_R_mean",
    "regret_R_std",
    "regret_Reg_mean",
    "regret_Reg_std",
    "cost_W_mean",
    "cost_W_std",
    "total_loss_mean",
    "total_loss_std",
];

const NA: &str = "NA";

/// One `(policy, parameter, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub param_name: String,
    pub param_value: f64,
    pub seed: usize,
    pub queries: usize,
    pub regret_r: Option<f64>,
    pub regret_reg: f64,
    pub cost_w: Option<f64>,
    pub total_loss: f64,
    pub stream_hash: String,
}

/// Mean and sample standard deviation across the seeds of one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub param_name: String,
    pub param_value: f64,
    pub seeds: usize,
    pub queries: (f64, f64),
    pub regret_r: Option<(f64, f64)>,
    pub regret_reg: (f64, f64),
    pub cost_w: Option<(f64, f64)>,
    pub total_loss: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Runs every policy setting on every seed. All settings with the same seed
/// index share one environment stream.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let envs: Vec<Environment> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| cfg.environment(i))
        .collect::<Result<_>>()?;

    let mut cells: Vec<(PolicySpec, String, f64, usize)> = Vec::new();
    let mut seen = HashSet::new();
    for grid in &cfg.policies {
        for (spec, name, value) in grid.cells() {
            if !seen.insert((spec.kind, name.clone(), value.to_bits())) {
                return Err(Error::config(
                    "policies",
                    format!("{} with {name} = {value} appears twice", spec.kind),
                ));
            }
            for seed in 0..cfg.seeds {
                cells.push((spec.clone(), name.clone(), value, seed));
            }
        }
    }

    let rows = cells
        .par_iter()
        .map(|(spec, name, value, seed_index)| {
            let env = &envs[*seed_index];
            let settings = cfg.settings(env);
            let seed = episode_seed(cfg.base_seed, spec.kind.name(), *value, *seed_index);
            let log = run_episode(env, spec, &settings, seed)?;
            Ok(SweepRow {
                policy: spec.kind.name().to_string(),
                param_name: name.clone(),
                param_value: *value,
                seed: *seed_index,
                queries: log.totals.queries,
                regret_r: log.totals.regret_r,
                regret_reg: log.totals.regret_reg,
                cost_w: log.totals.cost_w,
                total_loss: log.totals.total_loss,
                stream_hash: log.stream_hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregates = aggregate(&rows);
    Ok(SweepResult { rows, aggregates })
}

/// Groups rows by setting in order of first appearance.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, u64)> = Vec::new();
    for r in rows {
        let key = (r.policy.clone(), r.param_name.clone(), r.param_value.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(policy, param_name, bits)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| {
                    r.policy == policy && r.param_name == param_name && r.param_value.to_bits() == bits
                })
                .collect();
            let stat = |f: &dyn Fn(&SweepRow) -> f64| {
                mean_and_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let optional = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
                group
                    .iter()
                    .map(|r| f(r))
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| mean_and_std(&v))
            };
            AggregateRow {
                seeds: group.len(),
                queries: stat(&|r| r.queries as f64),
                regret_r: optional(&|r| r.regret_r),
                regret_reg: stat(&|r| r.regret_reg),
                cost_w: optional(&|r| r.cost_w),
                total_loss: stat(&|r| r.total_loss),
                policy,
                param_name,
                param_value: f64::from_bits(bits),
            }
        })
        .collect()
}

fn comment<W: Write>(writer: &mut W, header_comment: Option<&str>) -> Result<()> {
    if let Some(c) = header_comment {
        writeln!(writer, "# {c}")?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Detail CSV with [`SWEEP_COLUMNS`], preceded by an optional `#` line.
pub fn write_sweep_csv<W: Write>(mut writer: W, rows: &[SweepRow], header_comment: Option<&str>) -> Result<()> {
    comment(&mut writer, header_comment)?;
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        csv.write_record([
            r.policy.clone(),
            r.param_name.clone(),
            r.param_value.to_string(),
            r.seed.to_string(),
            r.queries.to_string(),
            opt(r.regret_r),
            r.regret_reg.to_string(),
            opt(r.cost_w),
            r.stream_hash.clone(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(
    mut writer: W,
    rows: &[AggregateRow],
    header_comment: Option<&str>,
) -> Result<()> {
    comment(&mut writer, header_comment)?;
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(AGGREGATE_COLUMNS)?;
    let pair = |p: (f64, f64)| [p.0.to_string(), p.1.to_string()];
    let opt_pair = |p: Option<(f64, f64)>| p.map_or_else(|| [NA.to_string(), NA.to_string()], pair);
    for r in rows {
        let mut record = vec![
            r.policy.clone(),
            r.param_name.clone(),
            r.param_value.to_string(),
            r.seeds.to_string(),
        ];
        record.extend(pair(r.queries));
        record.extend(opt_pair(r.regret_r));
        record.extend(pair(r.regret_reg));
        record.extend(opt_pair(r.cost_w));
        record.extend(pair(r.total_loss));
        csv.write_record(&record)?;
    }
    csv.flush()?;
    Ok(())
}

/// Mean regret of the fixed-budget master at one budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundPoint {
    pub budget: usize,
    pub seeds: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub mean_queries: f64,
}

/// Fixed-budget master on the lower-bound stream, with `η = 1` and
/// `C = √d`, for each budget over `seeds` streams.
pub fn lower_bound_sweep(
    spec: &DomainSpec,
    budgets: &[usize],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<LowerBoundPoint>> {
    if seeds == 0 {
        return Err(Error::config("seeds", "must be at least 1"));
    }
    let envs: Vec<Environment> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let (truth, rounds) = lower_bound_stream(spec, environment_seed(base_seed, i))?;
            Environment::new(rounds, Some(truth), None)
        })
        .collect::<Result<_>>()?;
    let settings = EpisodeSettings {
        norm_bound: (spec.total_dim() as f64).sqrt(),
        eta: 1.0,
        ..EpisodeSettings::default()
    };
    budgets
        .iter()
        .map(|&budget| {
            let policy = PolicySpec::fixed_budget(budget);
            let results = envs
                .par_iter()
                .enumerate()
                .map(|(i, env)| {
                    let seed = episode_seed(base_seed, policy.kind.name(), budget as f64, i);
                    let log = run_episode(env, &policy, &settings, seed)?;
                    let r = log.totals.regret_r.expect("lower-bound streams know f*");
                    Ok((r, log.totals.queries as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            let regrets: Vec<f64> = results.iter().map(|r| r.0).collect();
            let (mean_regret, std_regret) = mean_and_std(&regrets);
            Ok(LowerBoundPoint {
                budget,
                seeds,
                mean_regret,
                std_regret,
                mean_queries: results.iter().map(|r| r.1).sum::<f64>() / seeds as f64,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("a slope needs at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::invalid("log-log fit needs positive coordinates"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("x values are all equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
