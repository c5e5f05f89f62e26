//! Episodes, metrics and parameter sweeps.

mod config;
mod episode;
mod metrics;
mod seeds;
mod sweep;

pub use config::{EnvironmentConfig, ExperimentConfig, PolicyGrid};
pub use episode::{
    run_episode, Environment, EpisodeLog, EpisodeSettings, PolicyKind, PolicySpec, RoundRecord,
    Totals,
};
pub use metrics::{
    compute_cost, compute_regret, hindsight_comparator, log_det_check, mean_and_std,
    write_round_log, LogDetCheck,
};
pub use seeds::{environment_seed, episode_seed, hash64};
pub use sweep::{
    aggregate, log_log_slope, lower_bound_sweep, run_sweep, write_aggregate_csv, write_sweep_csv,
    AggregateRow, LowerBoundPoint, SweepResult, SweepRow, SWEEP_COLUMNS,
};
