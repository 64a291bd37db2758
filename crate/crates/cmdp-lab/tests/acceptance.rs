//! Release checklist for the laboratory, one test per numbered criterion.
//!
//! Each test exercises one binding claim end to end (oracle agreement,
//! learner behavior on the chain fixture, numerical identities, or the grid
//! smoke run) and prints a single summary line with the measured quantities,
//! so a run under `--nocapture` reads as a checklist.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use cmdp_lab::cmdp::{DualState, StateRepr, Trajectory, Transition};
use cmdp_lab::config::ExperimentConfig;
use cmdp_lab::driver::{dual_ascent_step, run_apdo, run_pdo, ApdoConfig, PdoConfig, RunOutput};
use cmdp_lab::envs::risky_chain::make_risky_chain;
use cmdp_lab::envs::TabularEnv;
use cmdp_lab::harness::run_experiment;
use cmdp_lab::nn::{AdamState, Mlp};
use cmdp_lab::offpolicy::{actor_dual_update, OffPolicyConfig};
use cmdp_lab::onpolicy::{gae_advantages, GaeConfig, SoftmaxPolicy, StepConfig, ValueBaseline};
use cmdp_lab::oracle::{brute_force_enumerate, solve_dual_bisection};
use cmdp_lab::seeding::{stream, StreamId};
use cmdp_lab::synth::random_cmdp;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const K_ADJ: usize = 5;
const LAMBDA_STAR: f64 = 9.0;

fn chain_env() -> TabularEnv {
    TabularEnv::new(make_risky_chain(0.9, 2.0).expect("chain construction"))
}

fn chain_pdo_config() -> PdoConfig {
    PdoConfig {
        step: StepConfig { alpha: 0.5, grad_clip: 10.0, weight_decay: 0.1 },
        beta: 0.1,
        epochs: 300,
        batch_size: 3080,
        gae: GaeConfig { gae_lambda: 0.95, gamma: 0.9 },
        normalize_advantages: false,
    }
}

fn chain_off_config() -> OffPolicyConfig {
    OffPolicyConfig {
        minibatch: 64,
        tau: 0.05,
        critic_lr: 1e-2,
        actor_lr: 3e-3,
        dual_lr_off: 1e-3,
        off_iterations: 3000,
        critic_hidden: vec![32, 32],
        actor_hidden: vec![32, 32],
        actor_weight_decay: 0.01,
        ..OffPolicyConfig::default()
    }
}

fn chain_setup() -> (SoftmaxPolicy, ValueBaseline) {
    (SoftmaxPolicy::tabular(1, &[0.0, -3.0]), ValueBaseline::tabular(1, 2))
}

/// Five-seed PDO and APDO learning curves on the chain, shared by the
/// criteria that compare the two algorithms. Built once; the build time is
/// recorded so the runtime budget can be checked no matter which test
/// triggers construction.
struct ChainRuns {
    pdo: Vec<RunOutput>,
    apdo: Vec<RunOutput>,
    build_secs: f64,
}

static CHAIN: OnceLock<ChainRuns> = OnceLock::new();

fn chain_runs() -> &'static ChainRuns {
    CHAIN.get_or_init(|| {
        let start = Instant::now();
        let pdo_cfg = chain_pdo_config();
        let apdo_cfg =
            ApdoConfig { pdo: chain_pdo_config(), k_adj: K_ADJ, off: chain_off_config() };
        let pdo = SEEDS
            .iter()
            .map(|&seed| {
                let (policy, baseline) = chain_setup();
                run_pdo(&mut chain_env(), policy, baseline, &pdo_cfg, seed).expect("pdo run")
            })
            .collect();
        let apdo = SEEDS
            .iter()
            .map(|&seed| {
                let (policy, baseline) = chain_setup();
                run_apdo(&mut chain_env(), policy, baseline, &apdo_cfg, seed).expect("apdo run")
            })
            .collect();
        ChainRuns { pdo, apdo, build_secs: start.elapsed().as_secs_f64() }
    })
}

fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn criterion_01_chain_oracle_matches_closed_form() {
    let start = Instant::now();
    let cmdp = make_risky_chain(0.9, 2.0).expect("chain construction");
    let sol = solve_dual_bisection(&cmdp).expect("bisection");
    let enumeration = brute_force_enumerate(&cmdp).expect("enumeration");
    let best = enumeration.best_feasible_value.expect("feasible instance");
    let elapsed = start.elapsed().as_secs_f64();

    assert!((sol.lambda_star - 9.0).abs() <= 1e-3, "lambda* = {}", sol.lambda_star);
    assert!((sol.r_star - 28.0).abs() <= 1e-3, "R* = {}", sol.r_star);
    assert!((sol.c_star - 2.0).abs() <= 1e-3, "C* = {}", sol.c_star);
    assert!((sol.r_star - best).abs() <= 1e-6, "bisection {} vs enumeration {best}", sol.r_star);
    assert!(elapsed < 1.0, "took {elapsed:.3}s");
    println!(
        "criterion 01: PASS — lambda*={:.6} R*={:.6} C*={:.6}, enumeration gap {:.2e}, {:.3}s",
        sol.lambda_star,
        sol.r_star,
        sol.c_star,
        (sol.r_star - best).abs(),
        elapsed
    );
}

#[test]
fn criterion_02_bisection_matches_enumeration_on_random_instances() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let cmdp = random_cmdp(&mut stream(seed, StreamId::Env));
        let sol = solve_dual_bisection(&cmdp).expect("bisection");
        let enumeration = brute_force_enumerate(&cmdp).expect("enumeration");
        let best = enumeration.best_feasible_value.expect("feasible instance");
        let gap = (sol.r_star - best).abs();
        assert!(gap <= 1e-6, "seed {seed}: bisection {} vs enumeration {best}", sol.r_star);
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "took {elapsed:.3}s");
    println!("criterion 02: PASS — 20 instances, worst oracle gap {worst:.2e}, {elapsed:.3}s");
}

#[test]
fn criterion_03_apdo_enforces_the_cost_limit() {
    let runs = chain_runs();
    let finals: Vec<f64> = runs
        .apdo
        .iter()
        .map(|run| {
            let tail = &run.records[run.records.len() - 50..];
            tail.iter().map(|r| r.avg_costs[0]).sum::<f64>() / tail.len() as f64
        })
        .collect();
    let med = median(finals.clone());
    assert!(
        (1.7..=2.3).contains(&med),
        "median final-50 cost {med} outside ±15% of the limit 2 (per seed: {finals:?})"
    );
    assert!(runs.build_secs < 300.0, "chain fixture took {:.1}s", runs.build_secs);
    println!(
        "criterion 03: PASS — median final-50 cost {med:.4} in [1.7, 2.3], fixture {:.1}s",
        runs.build_secs
    );
}

#[test]
fn criterion_04_adjustment_jumps_the_dual_variable() {
    let runs = chain_runs();
    let mut jumps = Vec::new();
    for (run, &seed) in runs.apdo.iter().zip(&SEEDS) {
        let before = run.records[K_ADJ].lambda[0];
        let after = run.records[K_ADJ + 1].lambda[0];
        let jump = (after - before).abs();
        assert!(jump >= 3.0, "seed {seed}: jump {jump} (lambda {before} -> {after})");
        assert!((6.0..=12.0).contains(&after), "seed {seed}: post-jump lambda {after}");
        jumps.push(jump);
    }
    for (run, &seed) in runs.pdo.iter().zip(&SEEDS) {
        let lambda = run.records[K_ADJ + 1].lambda[0];
        assert!(lambda < 3.0, "seed {seed}: PDO lambda {lambda} at epoch {}", K_ADJ + 1);
    }
    println!(
        "criterion 04: PASS — jump range [{:.2}, {:.2}] across seeds, PDO still below 3",
        jumps.iter().cloned().fold(f64::INFINITY, f64::min),
        jumps.iter().cloned().fold(0.0, f64::max)
    );
}

#[test]
fn criterion_05_adjustment_accelerates_dual_convergence() {
    let first_touch = |run: &RunOutput| -> f64 {
        run.records
            .iter()
            .find(|r| (r.lambda[0] - LAMBDA_STAR).abs() <= 1.0)
            .expect("multiplier never entered the band")
            .epoch as f64
    };
    let runs = chain_runs();
    let apdo_med = median(runs.apdo.iter().map(first_touch).collect());
    let pdo_med = median(runs.pdo.iter().map(first_touch).collect());
    assert!(
        pdo_med >= 1.5 * apdo_med,
        "PDO median first-touch epoch {pdo_med} vs APDO {apdo_med}"
    );
    println!(
        "criterion 05: PASS — median first epoch with |lambda-9|<=1: APDO {apdo_med}, PDO {pdo_med} ({:.1}x)",
        pdo_med / apdo_med
    );
}

#[test]
fn criterion_06_later_adjustment_gives_a_less_biased_estimate() {
    let start = Instant::now();
    let mut medians = Vec::new();
    for k_adj in [1usize, 5, 10] {
        let cfg = ApdoConfig {
            pdo: PdoConfig { epochs: 12, ..chain_pdo_config() },
            k_adj,
            off: chain_off_config(),
        };
        let errs: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let (policy, baseline) = chain_setup();
                let run = run_apdo(&mut chain_env(), policy, baseline, &cfg, seed)
                    .expect("apdo run");
                (run.lambda_off.expect("adjusted run")[0] - LAMBDA_STAR).abs()
            })
            .collect();
        medians.push(median(errs));
    }
    assert!(
        medians[0] >= medians[1] && medians[1] >= medians[2],
        "median |lambda_off - 9| not non-increasing across k_adj 1/5/10: {medians:?}"
    );
    println!(
        "criterion 06: PASS — median |lambda_off - 9| = {:.3} / {:.3} / {:.3} for k_adj 1/5/10, {:.1}s",
        medians[0],
        medians[1],
        medians[2],
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_07_backward_matches_finite_differences() {
    let mut rng = stream(7, StreamId::PolicyInit);
    let mut max_rel = 0.0_f64;
    for _ in 0..20 {
        let mut sizes = vec![rng.gen_range(2..=4)];
        for _ in 0..rng.gen_range(1..=2) {
            sizes.push(rng.gen_range(3..=6));
        }
        sizes.push(rng.gen_range(1..=3));
        let net = Mlp::new(&sizes, &mut rng);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |n: &Mlp| -> f64 { n.forward(&x).iter().zip(&c).map(|(o, ci)| o * ci).sum() };

        let cache = net.forward_cached(&x);
        let (mut gw, mut gb) = net.zero_grads();
        net.backward(&cache, &c, &mut gw, &mut gb);

        let eps = 1e-5;
        let mut check = |analytic: f64, perturb: &dyn Fn(&mut Mlp, f64)| {
            let mut plus = net.clone();
            perturb(&mut plus, eps);
            let mut minus = net.clone();
            perturb(&mut minus, -eps);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let rel = (analytic - fd).abs() / (1.0 + fd.abs());
            max_rel = max_rel.max(rel);
        };
        for l in 0..net.weights.len() {
            for i in 0..net.weights[l].len() {
                check(gw[l][i], &|n: &mut Mlp, h: f64| n.weights[l][i] += h);
            }
            for i in 0..net.biases[l].len() {
                check(gb[l][i], &|n: &mut Mlp, h: f64| n.biases[l][i] += h);
            }
        }
    }
    assert!(max_rel <= 1e-4, "max relative gradient error {max_rel:.2e}");
    println!("criterion 07: PASS — 20 nets, max relative gradient error {max_rel:.2e}");
}

#[test]
fn criterion_08_gae_reduces_to_td_and_monte_carlo() {
    let num_states = 6;
    let mut rng = stream(8, StreamId::Sampling);
    let mut max_mc_err = 0.0_f64;
    for case in 0..100 {
        let values: Vec<Vec<f64>> =
            (0..2).map(|_| (0..num_states).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let baseline = ValueBaseline::Tabular { values: values.clone() };
        let gamma = rng.gen_range(0.9..0.999);
        let len = rng.gen_range(1..=10);
        let mut transitions = Vec::with_capacity(len);
        let mut id = rng.gen_range(0..num_states);
        for t in 0..len {
            let next = rng.gen_range(0..num_states);
            transitions.push(Transition {
                state: StateRepr { id, features: vec![id as f64] },
                action: 0,
                reward: rng.gen_range(-1.0..1.0),
                cost_vector: vec![rng.gen_range(0.0..1.0)],
                next_state: StateRepr { id: next, features: vec![next as f64] },
                terminal: t == len - 1 && rng.gen_bool(0.5),
            });
            id = next;
        }
        let traj =
            Trajectory { transitions, policy_id: format!("gae-case{case}"), seed: case as u64 };

        for channel in 0..2 {
            let signal = |tr: &Transition| -> f64 {
                if channel == 0 {
                    tr.reward
                } else {
                    tr.cost_vector[0]
                }
            };
            let v = |s: &StateRepr| values[channel][s.id];
            let delta: Vec<f64> = traj
                .transitions
                .iter()
                .map(|tr| {
                    let bootstrap = if tr.terminal { 0.0 } else { v(&tr.next_state) };
                    signal(tr) + gamma * bootstrap - v(&tr.state)
                })
                .collect();

            let td = gae_advantages(
                &traj,
                &baseline,
                &GaeConfig { gae_lambda: 0.0, gamma },
                channel,
            );
            assert_eq!(td, delta, "case {case} channel {channel}: GAE(0) != TD residuals");

            let mc = gae_advantages(
                &traj,
                &baseline,
                &GaeConfig { gae_lambda: 1.0, gamma },
                channel,
            );
            for (t, &adv) in mc.iter().enumerate() {
                let last = traj.transitions.last().expect("non-empty");
                let tail: f64 = traj.transitions[t..]
                    .iter()
                    .enumerate()
                    .map(|(j, tr)| gamma.powi(j as i32) * signal(tr))
                    .sum();
                let bootstrap = if last.terminal { 0.0 } else { v(&last.next_state) };
                let horizon = (traj.len() - t) as i32;
                let expected =
                    tail + gamma.powi(horizon) * bootstrap - v(&traj.transitions[t].state);
                let err = (adv - expected).abs();
                max_mc_err = max_mc_err.max(err);
                assert!(
                    err <= 1e-10,
                    "case {case} channel {channel} step {t}: GAE(1) {adv} vs Monte Carlo {expected}"
                );
            }
        }
    }
    println!("criterion 08: PASS — 100 trajectories, GAE(0) exact, GAE(1) max error {max_mc_err:.2e}");
}

#[test]
fn criterion_09_dual_updates_never_go_negative() {
    let mut rng = stream(9, StreamId::Buffer);
    let mut updates = 0usize;

    for _ in 0..15_000 {
        let m = rng.gen_range(1..=3);
        let mut dual = DualState::new(m);
        for _ in 0..3 {
            let gap: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if rng.gen_bool(0.5) {
                dual.ascend(&gap, rng.gen_range(0.0..1.0));
            } else {
                dual_ascent_step(&mut dual, &gap, rng.gen_range(0.0..1.0));
            }
            updates += 1;
            let replacement: Vec<f64> = (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect();
            dual.overwrite(&replacement);
            updates += 1;
            assert!(dual.lambda().iter().all(|&l| l >= 0.0), "lambda {:?}", dual.lambda());
            assert!(
                dual.history().iter().flatten().all(|&l| l >= 0.0),
                "history holds a negative multiplier"
            );
        }
    }

    let mut actor = Mlp::new(&[2, 4, 2], &mut rng);
    let critic_r = Mlp::new(&[2, 4, 2], &mut rng);
    let critic_c = Mlp::new(&[2, 4, 2], &mut rng);
    let mut adam = AdamState::new(&actor);
    let cfg = OffPolicyConfig { dual_lr_off: 0.5, ..chain_off_config() };
    for _ in 0..10_000 {
        let features: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let next: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tr = Transition {
            state: StateRepr { id: 0, features },
            action: rng.gen_range(0..2),
            reward: rng.gen_range(-1.0..1.0),
            cost_vector: vec![rng.gen_range(0.0..1.0)],
            next_state: StateRepr { id: 0, features: next },
            terminal: rng.gen_bool(0.1),
        };
        let lambda = rng.gen_range(0.0..3.0);
        let limit = rng.gen_range(0.0..2.0);
        let new_lambda =
            actor_dual_update(&mut actor, &critic_r, &critic_c, &mut adam, &[&tr], lambda, limit, &cfg)
                .expect("finite update");
        assert!(new_lambda >= 0.0, "off-policy dual went negative: {new_lambda}");
        updates += 1;
    }

    assert_eq!(updates, 100_000);
    println!("criterion 09: PASS — {updates} randomized dual updates, multiplier never negative");
}

#[test]
fn criterion_10_both_algorithms_consume_identical_sample_budgets() {
    let runs = chain_runs();
    for ((pdo, apdo), &seed) in runs.pdo.iter().zip(&runs.apdo).zip(&SEEDS) {
        assert_eq!(pdo.records.len(), apdo.records.len(), "seed {seed}: epoch counts differ");
        for (p, a) in pdo.records.iter().zip(&apdo.records) {
            assert_eq!(
                p.samples, a.samples,
                "seed {seed} epoch {}: PDO {} vs APDO {} env steps",
                p.epoch, p.samples, a.samples
            );
        }
    }
    let total = runs.pdo[0].records.last().expect("non-empty run").samples;
    println!("criterion 10: PASS — identical per-epoch budgets, {total} env steps per run");
}

#[test]
fn criterion_11_grid_smoke_run_completes_within_the_limit() {
    let start = Instant::now();
    let json = r#"{
        "env": {
            "type": "grid",
            "grid_size": 3,
            "num_apples": 1,
            "num_bombs": 2,
            "episode_length": 15,
            "layout_seed": 7,
            "cost_limit": 0.2
        },
        "algorithm": "apdo",
        "seeds": [0],
        "output": "unused",
        "gamma": 0.995,
        "alpha": 0.1,
        "batch_size": 6000,
        "beta": 0.3,
        "epochs": 100,
        "k_adj": 5,
        "normalize_advantages": true,
        "policy_hidden": [64, 32],
        "minibatch": 64,
        "tau": 0.05,
        "critic_lr": 0.01,
        "actor_lr": 0.003,
        "dual_lr_off": 0.01,
        "off_iterations": 3000,
        "critic_hidden": [32, 32],
        "actor_hidden": [32, 32],
        "actor_weight_decay": 0.01
    }"#;
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig::parse(json).expect("smoke config");
    cfg.output = dir.path().to_path_buf();
    let paths = run_experiment(&cfg).expect("smoke run");

    let run_csv = paths
        .iter()
        .find(|p| p.file_name().is_some_and(|n| n == "apdo_seed0.csv"))
        .expect("per-seed curve");
    let text = std::fs::read_to_string(run_csv).expect("read curve");
    let mut rows = text.lines();
    let header: Vec<&str> = rows.next().expect("header").split(',').collect();
    let cost_col = header.iter().position(|&c| c == "avg_cost_1").expect("cost column");
    let mut final_cost = f64::NAN;
    let mut epochs = 0;
    for row in rows {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().expect("numeric cell")).collect();
        assert!(cells.iter().all(|v| v.is_finite()), "non-finite metric in row: {row}");
        final_cost = cells[cost_col];
        epochs += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();

    assert_eq!(epochs, 100);
    assert!(final_cost <= 1.25 * 0.2, "final cost {final_cost} above 1.25 * limit");
    assert!(elapsed < 600.0, "took {elapsed:.1}s");
    println!(
        "criterion 11: PASS — grid smoke final cost {final_cost:.4} <= 0.25, 100 epochs, {elapsed:.1}s"
    );
}
