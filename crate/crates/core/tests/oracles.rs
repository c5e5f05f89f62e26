use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qufur_core::env::{
    lower_bound_stream, read_replay, subblock_lengths, synthetic_stream, write_replay,
    DomainOrdering, DomainSpec, StreamRound,
};
use qufur_core::harness::{
    compute_cost, compute_regret, log_det_check, run_episode, run_sweep, Environment,
    EpisodeLog, EpisodeSettings, ExperimentConfig, PolicySpec, RoundRecord, Totals,
};
use qufur_core::kernel::{effective_dimension, Kernel};
use qufur_core::nonlinear::{
    beta_threshold, confidence_set, covering_number, disagreement, erm, nonlinear_master_step,
    nonlinear_qufur_step,
};
use qufur_core::policy::{general_master_copy_exponent, CopyStreams};
use qufur_core::{
    HypothesisTable, KernelFunction, NonlinearLearner, NonlinearMaster, PolicyConfig, RlsState,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_table(r: &mut ChaCha8Rng, hypotheses: usize, points: usize) -> HypothesisTable {
    let values = (0..hypotheses)
        .map(|_| (0..points).map(|_| r.random_range(-1.0..=1.0)).collect())
        .collect();
    HypothesisTable::new((0..points).map(|i| i.to_string()).collect(), values, Some(0)).unwrap()
}

fn constant_table(constants: &[f64], points: usize) -> HypothesisTable {
    HypothesisTable::new(
        (0..points).map(|i| format!("x{i}")).collect(),
        constants.iter().map(|&c| vec![c; points]).collect(),
        Some(0),
    )
    .unwrap()
}

fn small_synthetic(seed: u64) -> Environment {
    let spec = DomainSpec::new(&[(3, 80), (2, 60), (4, 60)], DomainOrdering::Sequential).unwrap();
    let (truth, rounds) = synthetic_stream(&spec, 10, 0.3, seed).unwrap();
    Environment::new(rounds, Some(truth), None).unwrap()
}

#[test]
fn ridge_state_matches_normal_equations() {
    let mut r = rng(1);
    let d = 5;
    let c = 1.7;
    let mut state = RlsState::new(d, c).unwrap();
    let mut gram = DMatrix::<f64>::identity(d, d) / (c * c);
    let mut xty = DVector::<f64>::zeros(d);
    for _ in 0..300 {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-0.4..0.4)).collect();
        let y: f64 = r.random_range(-1.0..1.0);
        state.absorb(&x, y).unwrap();
        let v = DVector::from_column_slice(&x);
        gram += &v * v.transpose();
        xty += v * y;
    }
    let theta = gram.clone().cholesky().unwrap().solve(&xty);
    for (a, b) in state.theta_hat().iter().zip(theta.iter()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
    }
    let probe = DVector::from_column_slice(&[0.1, -0.2, 0.3, 0.0, 0.5]);
    let direct = (probe.transpose() * gram.try_inverse().unwrap() * &probe)[(0, 0)];
    assert_abs_diff_eq!(state.quad_form(probe.as_slice()).unwrap(), direct, epsilon = 1e-12);
}

#[test]
fn effective_dimension_of_rbf_gram_matches_eigen_scan() {
    let mut r = rng(2);
    let kernel = KernelFunction::Rbf { gamma: 2.0 };
    let lambda = 0.5;
    let n = 40;
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        kernel.eval(&pts[i], &pts[j]) + if i == j { lambda } else { 0.0 }
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let eig: Vec<f64> = eig.into_iter().map(|e| e.max(lambda)).collect();
    for s in [2usize, 10, 200, 5000] {
        let ln_s = (s as f64).ln();
        let expected = (1..=n)
            .find(|&j| {
                let tail: f64 = eig[j..].iter().map(|e| e - lambda).sum();
                j as f64 * lambda * ln_s > tail
            })
            .unwrap_or(n);
        assert_eq!(effective_dimension(&eig, lambda, s).unwrap(), expected, "s = {s}");
    }
}

#[test]
fn erm_matches_exhaustive_scan() {
    let mut r = rng(3);
    for _ in 0..50 {
        let table = random_table(&mut r, 10, 6);
        assert_eq!(erm(&table, &[]).unwrap(), 0);
        let labeled: Vec<(usize, f64)> = (0..5)
            .map(|_| (r.random_range(0..6), r.random_range(-1.0..1.0)))
            .collect();
        let losses: Vec<f64> = (0..10)
            .map(|f| labeled.iter().map(|&(x, y)| (table.value(f, x) - y).powi(2)).sum())
            .collect();
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = losses.iter().position(|l| *l == min).unwrap();
        assert_eq!(erm(&table, &labeled).unwrap(), expected);
    }
    let pair = constant_table(&[0.0, 1.0], 1);
    assert_eq!(erm(&pair, &[(0, 1.0)]).unwrap(), 1);
}

#[test]
fn confidence_membership_matches_exhaustive_scan() {
    let mut r = rng(4);
    for _ in 0..50 {
        let table = random_table(&mut r, 12, 5);
        let labeled: Vec<(usize, f64)> = (0..r.random_range(0..8))
            .map(|_| (r.random_range(0..5), r.random_range(-1.0..1.0)))
            .collect();
        let center = r.random_range(0..12);
        let threshold = r.random_range(0.0..3.0);
        let set = confidence_set(&table, center, &labeled, threshold).unwrap();
        let expected: Vec<usize> = (0..12)
            .filter(|&f| {
                labeled
                    .iter()
                    .map(|&(x, _)| (table.value(f, x) - table.value(center, x)).powi(2))
                    .sum::<f64>()
                    <= threshold
            })
            .collect();
        assert_eq!(set.member_indices, expected);
        if labeled.is_empty() {
            assert_eq!(set.member_indices.len(), 12);
        }
    }
}

#[test]
fn separating_label_with_zero_threshold_keeps_only_duplicates() {
    let table = HypothesisTable::new(
        vec!["a".into(), "b".into()],
        vec![vec![0.0, 0.2], vec![1.0, 0.2], vec![0.0, -0.7]],
        None,
    )
    .unwrap();
    let set = confidence_set(&table, 0, &[(0, 0.1)], 0.0).unwrap();
    assert_eq!(set.member_indices, vec![0, 2]);
}

#[test]
fn disagreement_examples() {
    let table = constant_table(&[1.0, -1.0, 0.0], 2);
    let all = confidence_set(&table, 0, &[], 0.0).unwrap();
    assert_eq!(disagreement(&table, &all, 1).unwrap(), 4.0);
    let single = confidence_set(&table, 2, &[(0, 0.0)], 0.5).unwrap();
    assert_eq!(single.member_indices, vec![2]);
    assert_eq!(disagreement(&table, &single, 0).unwrap(), 0.0);
}

#[test]
fn beta_threshold_examples() {
    assert_abs_diff_eq!(
        beta_threshold(0, 10, 1.0, 0.1, 2).unwrap(),
        8.0 * 80f64.ln(),
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(8.0 * 80f64.ln(), 35.05, epsilon = 1e-2);
    assert_eq!(beta_threshold(0, 10, 0.0, 0.3, 5).unwrap(), 0.0);
    assert_abs_diff_eq!(beta_threshold(100, 10, 0.0, 0.3, 1).unwrap(), 32.0, epsilon = 1e-12);
    assert!(beta_threshold(1, 10, 1.0, 1.0, 1).is_err());
    assert!(beta_threshold(1, 10, 1.0, 0.0, 1).is_err());
}

#[test]
fn covering_number_examples() {
    let spread = constant_table(&[-1.0, -0.5, 0.0, 0.5, 1.0], 3);
    assert_eq!(covering_number(&spread, 2.5), 1);
    assert_eq!(covering_number(&spread, 0.2), 5);
    assert_eq!(covering_number(&spread, 0.5), 3);
}

#[test]
fn zero_alpha_never_queries() {
    let mut r = rng(5);
    let table = Arc::new(random_table(&mut r, 8, 4));
    let cfg = PolicyConfig::new(0.0, 0.5, 1.0, None, 100).unwrap();
    let learner = NonlinearLearner::new(table, 0.1, 100).unwrap();
    for t in 0..100 {
        let d = nonlinear_qufur_step(&learner, &cfg, t % 4, &mut r).unwrap();
        assert!(!d.queried);
        assert_eq!(d.query_prob, 0.0);
    }
}

#[test]
fn singleton_class_has_no_uncertainty() {
    let table = Arc::new(constant_table(&[0.3], 3));
    let cfg = PolicyConfig::new(1e6, 0.5, 1.0, None, 50).unwrap();
    let learner = NonlinearLearner::new(table, 0.1, 50).unwrap();
    let mut r = rng(6);
    let mut regret = 0.0;
    for t in 0..50 {
        let d = nonlinear_qufur_step(&learner, &cfg, t % 3, &mut r).unwrap();
        assert_eq!(d.delta, 0.0);
        assert!(!d.queried);
        regret += (d.prediction - 0.3f64).powi(2);
    }
    assert_eq!(regret, 0.0);
}

#[test]
fn two_hypotheses_stop_querying_once_separated() {
    // f0 ≡ 1 and f1 ≡ −1 with f* = f0. The first round has Δ = 4 so α = 1
    // queries surely; one label puts f1 at distance 4 > β₁, after which the
    // set is {f0} and Δ = 0.
    let table = Arc::new(constant_table(&[1.0, -1.0], 1));
    let eta = 0.1;
    let horizon = 30;
    let cfg = PolicyConfig::new(1.0, eta, 1.0, None, horizon).unwrap();
    let mut learner = NonlinearLearner::new(table, 0.1, horizon).unwrap();
    assert!(beta_threshold(1, horizon, eta, 0.1, 2).unwrap() < 4.0);
    let mut r = rng(7);
    let mut trace = Vec::new();
    for _ in 0..horizon {
        let d = nonlinear_qufur_step(&learner, &cfg, 0, &mut r).unwrap();
        trace.push((d.delta, d.queried));
        if d.queried {
            let noise: f64 = r.random_range(-0.1..0.1);
            learner.absorb(0, 1.0 + noise).unwrap();
        }
    }
    assert_eq!(trace[0], (4.0, true));
    assert!(trace[1..].iter().all(|&(delta, q)| delta == 0.0 && !q));
    assert_eq!(learner.center().unwrap(), 0);
}

fn run_nonlinear_master(table: Arc<HypothesisTable>, budget: usize, horizon: usize, seed: u64) -> usize {
    let cfg = PolicyConfig::new(0.0, 0.3, 1.0, Some(budget), horizon).unwrap();
    let mut master = NonlinearMaster::new(table.clone(), &cfg, 0.1).unwrap();
    let streams = CopyStreams::new(seed);
    let mut r = rng(seed);
    let mut queries = 0;
    for t in 0..horizon {
        let x = r.random_range(0..table.support_size());
        let d = nonlinear_master_step(&mut master, &cfg, x, t, &streams).unwrap();
        if d.queried {
            queries += 1;
            let y = table.value(0, x) + 0.3 * r.random_range(-1.0..1.0);
            master.learner.absorb(x, y).unwrap();
        }
    }
    assert_eq!(queries, master.ledger.total_spent());
    queries
}

#[test]
fn nonlinear_master_grid_and_budget() {
    let mut r = rng(8);
    let table = Arc::new(random_table(&mut r, 20, 6));
    let horizon = 300;
    let cfg = PolicyConfig::new(0.0, 0.3, 1.0, Some(40), horizon).unwrap();
    let master = NonlinearMaster::new(table.clone(), &cfg, 0.1).unwrap();
    let k = general_master_copy_exponent(horizon);
    assert_eq!(k, 27);
    let alphas: Vec<f64> = master.ledger.copies().iter().map(|c| c.alpha).collect();
    assert_eq!(alphas.len(), k + 1);
    for (i, a) in alphas.iter().enumerate() {
        assert_eq!(*a, 2f64.powi(i as i32) / (horizon * horizon) as f64);
    }
    assert_eq!(run_nonlinear_master(table.clone(), 0, horizon, 1), 0);
    for seed in 0..100 {
        let budget = (seed as usize % 7) * 10;
        assert!(run_nonlinear_master(table.clone(), budget, horizon, seed) <= budget);
    }
}

#[test]
fn twenty_domain_synthetic_configuration() {
    let spec = DomainSpec::synthetic_twenty(DomainOrdering::Sequential);
    assert_eq!(spec.entries.len(), 20);
    assert!(spec.entries.iter().all(|e| (e.dim, e.duration) == (6, 100) || (e.dim, e.duration) == (3, 50)));
    assert!(spec.total_dim() <= 88);
    let eta = 0.1f64.sqrt();
    let (truth, rounds) = synthetic_stream(&spec, 88, eta, 11).unwrap();
    assert_eq!(truth.noise_eta, eta);
    assert_abs_diff_eq!(truth.theta_star.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
    for r in &rounds {
        assert_abs_diff_eq!(r.x.iter().map(|v| v * v).sum::<f64>().sqrt(), 1.0, epsilon = 1e-9);
    }
    // Gram check: stack each domain's inputs and project onto the others.
    let domains = spec.entries.len();
    for u in 0..domains {
        let mine: Vec<&StreamRound> = rounds.iter().filter(|r| r.domain_id == u).collect();
        let span = DMatrix::from_fn(88, mine.len(), |i, j| mine[j].x[i]);
        for other in rounds.iter().filter(|r| r.domain_id != u) {
            let proj = span.transpose() * DVector::from_column_slice(&other.x);
            assert!(proj.amax() <= 1e-9);
        }
    }
    // Empirical noise variance around the true mean.
    let resid: Vec<f64> = rounds.iter().map(|r| r.label - r.true_mean.unwrap()).collect();
    let var = resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64;
    assert!((var - 0.1).abs() < 0.02, "noise variance {var}");
}

#[test]
fn lower_bound_examples() {
    let spec = DomainSpec::new(&[(1, 4)], DomainOrdering::Sequential).unwrap();
    let (truth, rounds) = lower_bound_stream(&spec, 3).unwrap();
    let theta = truth.theta_star.unwrap()[0];
    assert_eq!(rounds.len(), 4);
    for r in &rounds {
        assert_eq!(r.x, vec![1.0]);
        assert_eq!(r.true_mean, Some(theta));
    }
    assert_eq!(subblock_lengths(3, 10), vec![3, 3, 4]);
    for d in 1..=12 {
        for t in d..=60 {
            assert!(subblock_lengths(d, t).iter().all(|&l| 2 * d * l >= t));
        }
    }
    let spec = DomainSpec::new(&[(2, 100), (4, 400)], DomainOrdering::Sequential).unwrap();
    let (truth, rounds) = lower_bound_stream(&spec, 9).unwrap();
    let theta = truth.theta_star.unwrap();
    let mut coord = 0;
    let mut start = 0;
    for e in &spec.entries {
        for len in subblock_lengths(e.dim, e.duration) {
            for r in &rounds[start..start + len] {
                assert_eq!(r.x.iter().position(|v| *v == 1.0), Some(coord));
                assert_eq!(r.true_mean, Some(theta[coord]));
            }
            start += len;
            coord += 1;
        }
    }
    // Bernoulli frequencies track θ* over long blocks.
    let (truth, rounds) = lower_bound_stream(&DomainSpec::new(&[(1, 20000)], DomainOrdering::Sequential).unwrap(), 5).unwrap();
    let freq = rounds.iter().map(|r| r.label).sum::<f64>() / rounds.len() as f64;
    assert!((freq - truth.theta_star.unwrap()[0]).abs() < 0.02);
}

#[test]
fn replay_values_are_bit_exact() {
    let text = "t,domain_id,true_mean,y,x_0,x_1\n\
                0,0,0.25,0.3,0.1,0.2\n\
                1,1,NA,-0.125,0.6,-0.8\n\
                2,1,-0.5,1e-3,0.3333333333333333,0\n";
    let replay = read_replay(text.as_bytes()).unwrap();
    assert_eq!(replay.dim, 2);
    assert_eq!(replay.rounds.len(), 3);
    assert_eq!(replay.rounds[0].x, vec![0.1, 0.2]);
    assert_eq!(replay.rounds[1].x, vec![0.6, -0.8]);
    assert_eq!(replay.rounds[1].true_mean, None);
    assert_eq!(replay.rounds[2].label, 0.001);
    assert_eq!(replay.rounds[2].x[0], 1.0 / 3.0);
    assert_eq!(replay.rescaled_rows, 0);
}

#[test]
fn replay_without_true_mean_reports_only_reg() {
    let env = small_synthetic(12);
    let mut buf = Vec::new();
    write_replay(&mut buf, &env.rounds).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let stripped: String = text
        .lines()
        .map(|line| {
            let mut cells: Vec<&str> = line.split(',').collect();
            cells.remove(2);
            cells.join(",") + "\n"
        })
        .collect();
    assert!(stripped.starts_with("t,domain_id,y,x_0"));
    let replay = read_replay(stripped.as_bytes()).unwrap();
    assert!(!replay.has_true_mean());
    let replayed = Environment::new(replay.rounds, None, None).unwrap();
    let log = run_episode(&replayed, &PolicySpec::qufur(10.0), &EpisodeSettings::default(), 4).unwrap();
    assert_eq!(log.totals.regret_r, None);
    assert!(log.totals.regret_reg.is_finite());
    assert!(compute_cost(&log, 1.0).is_err());
}

#[test]
fn exported_stream_replays_to_identical_metrics() {
    let env = small_synthetic(13);
    let mut buf = Vec::new();
    write_replay(&mut buf, &env.rounds).unwrap();
    let replay = read_replay(buf.as_slice()).unwrap();
    assert_eq!(replay.rounds, env.rounds.iter().map(|r| StreamRound { support_id: None, ..r.clone() }).collect::<Vec<_>>());
    let replayed = Environment::new(replay.rounds, None, None).unwrap();
    assert_eq!(replayed.stream_hash, env.stream_hash);
    let settings = EpisodeSettings::default();
    for policy in [PolicySpec::qufur(30.0), PolicySpec::fixed_budget(40), PolicySpec::uniform(0.2)] {
        let a = run_episode(&env, &policy, &settings, 77).unwrap();
        let b = run_episode(&replayed, &policy, &settings, 77).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.totals, b.totals);
    }
}

#[test]
fn greedy_with_full_budget_is_fully_supervised_ridge() {
    let env = small_synthetic(14);
    let horizon = env.horizon();
    let settings = EpisodeSettings { norm_bound: 2.0, ..EpisodeSettings::default() };
    let log = run_episode(&env, &PolicySpec::greedy().with_budget(horizon), &settings, 1).unwrap();
    assert_eq!(log.totals.queries, horizon);
    let d = env.dim;
    let mut gram = DMatrix::<f64>::identity(d, d) * 0.25;
    let mut xty = DVector::<f64>::zeros(d);
    let mut r = 0.0;
    for (rec, round) in log.rounds.iter().zip(&env.rounds) {
        let theta = gram.clone().cholesky().unwrap().solve(&xty);
        let x = DVector::from_column_slice(&round.x);
        let expected = theta.dot(&x).clamp(-1.0, 1.0);
        assert_abs_diff_eq!(rec.prediction, expected, epsilon = 1e-9);
        r += (expected - round.true_mean.unwrap()).powi(2);
        gram += &x * x.transpose();
        xty += x * round.label;
    }
    assert_abs_diff_eq!(log.totals.regret_r.unwrap(), r, epsilon = 1e-8);
}

#[test]
fn zero_budget_policies_never_query() {
    let env = small_synthetic(15);
    let settings = EpisodeSettings::default();
    let policies = [
        PolicySpec::fixed_budget(0),
        PolicySpec::oracle(0),
        PolicySpec::qufur(1e6).with_budget(0),
        PolicySpec::uniform(1.0).with_budget(0),
        PolicySpec::greedy().with_budget(0),
        PolicySpec::kernel_qufur(1e6, KernelFunction::Linear).with_budget(0),
    ];
    for policy in policies {
        let log = run_episode(&env, &policy, &settings, 2).unwrap();
        assert_eq!(log.totals.queries, 0, "{}", log.policy_name);
        assert!(log.rounds.iter().all(|r| r.prediction == 0.0 && !r.queried));
        let again = run_episode(&env, &policy, &settings, 2).unwrap();
        assert_eq!(log, again);
    }
}

fn single_round_log(prediction: f64, queries: usize, regret_r: Option<f64>) -> EpisodeLog {
    EpisodeLog {
        policy_name: "greedy".into(),
        policy: PolicySpec::greedy(),
        settings: EpisodeSettings::default(),
        seed: 0,
        stream_hash: String::new(),
        rounds: vec![RoundRecord {
            t: 0,
            domain_id: 0,
            prediction,
            delta: 0.0,
            query_prob: 0.0,
            queried: false,
            loss: prediction * prediction,
            quad_form: None,
        }],
        totals: Totals {
            queries,
            regret_r,
            regret_reg: 0.0,
            total_loss: 0.0,
            cost_w: None,
        },
    }
}

#[test]
fn regret_and_cost_examples() {
    let round = StreamRound {
        t: 0,
        x: vec![0.0],
        domain_id: 0,
        true_mean: Some(0.0),
        label: 0.0,
        support_id: None,
    };
    let env = Environment::new(vec![round], None, None).unwrap();
    let (r, reg) = compute_regret(&single_round_log(0.5, 0, None), &env).unwrap();
    assert_eq!(r, Some(0.25));
    assert_eq!(reg, 0.25);
    let (r, _) = compute_regret(&single_round_log(0.0, 0, None), &env).unwrap();
    assert_eq!(r, Some(0.0));

    assert_eq!(compute_cost(&single_round_log(0.0, 10, Some(3.5)), 2.0).unwrap(), 17.0);
    assert_eq!(compute_cost(&single_round_log(0.0, 10, Some(3.5)), 0.0).unwrap(), 10.0);
    assert_eq!(compute_cost(&single_round_log(0.0, 4, Some(0.0)), 5.0).unwrap(), 4.0);
}

#[test]
fn episode_totals_agree_with_metric_functions() {
    let env = small_synthetic(16);
    let settings = EpisodeSettings { cost_c: 3.0, ..EpisodeSettings::default() };
    let log = run_episode(&env, &PolicySpec::qufur(25.0), &settings, 5).unwrap();
    let (r, reg) = compute_regret(&log, &env).unwrap();
    assert_eq!(log.totals.regret_r, r);
    assert_eq!(log.totals.regret_reg, reg);
    assert_eq!(log.totals.cost_w, Some(compute_cost(&log, 3.0).unwrap()));
    let loss: f64 = log.rounds.iter().map(|r| r.loss).sum();
    assert_abs_diff_eq!(log.totals.total_loss, loss, epsilon = 1e-12);
}

#[test]
fn potential_is_within_twice_the_log_det() {
    let settings = EpisodeSettings::default();
    for seed in 0..10 {
        let env = small_synthetic(100 + seed);
        for policy in [PolicySpec::qufur(5.0), PolicySpec::greedy(), PolicySpec::fixed_budget(60)] {
            let log = run_episode(&env, &policy, &settings, seed).unwrap();
            for check in log_det_check(&log, &env, settings.norm_bound).unwrap() {
                assert!(check.holds_with_factor(2.0), "{check:?}");
            }
        }
    }
}

#[test]
fn sweep_rows_are_paired_on_streams() {
    let text = r#"{
        "environment": {"kind": "synthetic", "domains": [[2, 30], [1, 20]], "eta": 0.2},
        "policies": [{"kind": "uniform", "mu": 0.3}, {"kind": "qufur", "alpha": [2, 20]}],
        "seeds": 3
    }"#;
    let cfg = ExperimentConfig::from_json_str(text, ".").unwrap();
    let result = run_sweep(&cfg).unwrap();
    assert_eq!(result.rows.len(), 9);
    assert_eq!(result.aggregates.len(), 3);
    assert!(result.aggregates.iter().all(|a| a.seeds == 3));
    for seed in 0..3 {
        let hashes: Vec<&str> = result
            .rows
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.stream_hash.as_str())
            .collect();
        assert_eq!(hashes.len(), 3);
        assert!(hashes.iter().all(|h| *h == hashes[0]));
    }
    let distinct: std::collections::HashSet<&str> =
        result.rows.iter().map(|r| r.stream_hash.as_str()).collect();
    assert_eq!(distinct.len(), 3);

    let one = r#"{
        "environment": {"kind": "synthetic", "domains": [[2, 30]], "eta": 0.2},
        "policy": {"kind": "uniform", "mu": 0.5},
        "seeds": 3
    }"#;
    let result = run_sweep(&ExperimentConfig::from_json_str(one, ".").unwrap()).unwrap();
    assert_eq!((result.rows.len(), result.aggregates.len()), (3, 1));
}

#[test]
fn uniform_grid_spans_the_usual_range() {
    let text = r#"{
        "environment": {"kind": "synthetic", "domains": [[2, 40]], "eta": 0.2},
        "policy": {"kind": "uniform", "mu": [0.05, 0.25, 0.5, 1.0]},
        "seeds": 2
    }"#;
    let result = run_sweep(&ExperimentConfig::from_json_str(text, ".").unwrap()).unwrap();
    let q: Vec<f64> = result.aggregates.iter().map(|a| a.queries.0).collect();
    assert_eq!(q.len(), 4);
    assert_eq!(q[3], 40.0);
    assert!(q.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn larger_alpha_trades_labels_for_regret() {
    let alphas = [0.5, 2.0, 8.0, 32.0, 128.0, 512.0];
    let seeds = 20;
    let settings = EpisodeSettings { eta: 0.3, ..EpisodeSettings::default() };
    let envs: Vec<Environment> = (0..seeds).map(|s| small_synthetic(500 + s)).collect();
    let stats: Vec<((f64, f64), (f64, f64))> = alphas
        .iter()
        .map(|&a| {
            let logs: Vec<EpisodeLog> = envs
                .iter()
                .enumerate()
                .map(|(i, env)| run_episode(env, &PolicySpec::qufur(a), &settings, i as u64).unwrap())
                .collect();
            let q: Vec<f64> = logs.iter().map(|l| l.totals.queries as f64).collect();
            let r: Vec<f64> = logs.iter().map(|l| l.totals.regret_r.unwrap()).collect();
            (mean_se(&q), mean_se(&r))
        })
        .collect();
    for w in stats.windows(2) {
        let ((q0, qse0), (r0, rse0)) = w[0];
        let ((q1, qse1), (r1, rse1)) = w[1];
        assert!(q1 >= q0 - qse0.hypot(qse1), "queries fell: {q0} -> {q1}");
        assert!(r1 <= r0 + rse0.hypot(rse1), "regret rose: {r0} -> {r1}");
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn replay_reads_from_disk_and_rescales_long_rows() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    std::io::Write::write_all(
        &mut file,
        b"# exported by hand\nt,domain_id,true_mean,y,x_0,x_1\n0,0,NA,0.5,3,4\n4,1,NA,0.25,0.6,0\n",
    )
    .unwrap();
    let replay = qufur_core::env::replay_stream(file.path()).unwrap();
    assert_eq!(replay.rescaled_rows, 1);
    assert_abs_diff_eq!(replay.rounds[0].x[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(replay.rounds[0].x[1], 0.8, epsilon = 1e-15);
    assert_eq!(replay.rounds[1].x, vec![0.6, 0.0]);
    assert_eq!(replay.rounds[1].t, 4);
}
