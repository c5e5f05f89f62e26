use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qufur_core::env::{write_replay, DomainOrdering, DomainSpec};
use qufur_core::harness::{
    episode_seed, log_log_slope, lower_bound_sweep, run_episode, run_sweep, write_aggregate_csv,
    write_round_log, write_sweep_csv, ExperimentConfig,
};
use qufur_core::nonlinear::eluder_dimension;
use qufur_core::{Error, HypothesisTable, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "qufur", version, about = "Uncertainty-proportional label querying experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its per-round log.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Seed index; selects the environment stream and the policy seed.
        #[arg(long, default_value_t = 0)]
        seed: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every policy setting on every seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Regret of the fixed-budget master on the lower-bound stream.
    Lowerbound {
        /// JSON file with `[[d_u, T_u], ...]` or `{"domains": [...]}`.
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated budgets.
        #[arg(long)]
        budgets: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eluder dimension of a hypothesis table.
    Eluder {
        #[arg(long)]
        class: PathBuf,
        #[arg(long)]
        epsilon: f64,
        /// Comma-separated support indices; defaults to the whole support.
        #[arg(long)]
        support: Option<String>,
    },
    /// Write a configured stream in the replay CSV format.
    ExportStream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn timestamp() -> String {
    format!("generated_at={}", chrono::Utc::now().to_rfc3339())
}

fn parse_list<T: std::str::FromStr>(text: &str, field: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Config {
                field: field.into(),
                message: format!("`{s}` is not a valid entry"),
            })
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cells: Vec<_> = cfg.policies.iter().flat_map(|g| g.cells()).collect();
            let [(policy, name, value)] = cells.as_slice() else {
                return Err(Error::Config {
                    field: "policy".into(),
                    message: "`run` needs exactly one policy setting".into(),
                });
            };
            let env = cfg.environment(seed)?;
            let settings = cfg.settings(&env);
            let episode = episode_seed(cfg.base_seed, policy.kind.name(), *value, seed);
            let log = run_episode(&env, policy, &settings, episode)?;
            write_round_log(create(&out)?, &log)?;
            let summary = json!({
                "policy": log.policy_name,
                "param_name": name,
                "param_value": value,
                "seed": seed,
                "queries": log.totals.queries,
                "regret_R": log.totals.regret_r,
                "regret_Reg": log.totals.regret_reg,
                "total_loss": log.totals.total_loss,
                "cost_W": log.totals.cost_w,
                "stream_hash": log.stream_hash,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sweep { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = run_sweep(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let stamp = timestamp();
            write_sweep_csv(create(&out_dir.join("sweep.csv"))?, &result.rows, Some(&stamp))?;
            write_aggregate_csv(
                create(&out_dir.join("sweep_aggregate.csv"))?,
                &result.aggregates,
                Some(&stamp),
            )?;
            println!(
                "{} runs, {} settings written to {}",
                result.rows.len(),
                result.aggregates.len(),
                out_dir.display()
            );
        }
        Command::Lowerbound {
            spec,
            budgets,
            seeds,
            base_seed,
            out,
        } => {
            let text = std::fs::read_to_string(&spec)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let domains = value.get("domains").cloned().unwrap_or(value);
            let pairs: Vec<(usize, usize)> = serde_json::from_value(domains)?;
            let domain_spec = DomainSpec::new(&pairs, DomainOrdering::Sequential).map_err(|e| {
                Error::Config {
                    field: "spec".into(),
                    message: e.to_string(),
                }
            })?;
            let budgets: Vec<usize> = parse_list(&budgets, "budgets")?;
            let points = lower_bound_sweep(&domain_spec, &budgets, seeds, base_seed)?;
            let mut csv = csv_writer(&out)?;
            csv.write_record(["budget", "seeds", "mean_R", "std_R", "mean_queries"])
                .map_err(Error::from)?;
            for p in &points {
                csv.write_record([
                    p.budget.to_string(),
                    p.seeds.to_string(),
                    p.mean_regret.to_string(),
                    p.std_regret.to_string(),
                    p.mean_queries.to_string(),
                ])
                .map_err(Error::from)?;
            }
            csv.flush()?;
            let pts: Vec<(f64, f64)> = points
                .iter()
                .map(|p| (p.budget as f64, p.mean_regret))
                .collect();
            match log_log_slope(&pts) {
                Ok(slope) => println!("log-log slope: {slope}"),
                Err(e) => println!("log-log slope unavailable: {e}"),
            }
        }
        Command::Eluder {
            class,
            epsilon,
            support,
        } => {
            let table = HypothesisTable::load(&class)?;
            let ids: Vec<usize> = match support {
                Some(s) => parse_list(&s, "support")?,
                None => (0..table.support_size()).collect(),
            };
            println!("{}", eluder_dimension(&table, &ids, epsilon)?);
        }
        Command::ExportStream { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env = cfg.environment(seed)?;
            write_replay(create(&out)?, &env.rounds)?;
            println!("{} rounds written to {}", env.rounds.len(), out.display());
        }
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}
