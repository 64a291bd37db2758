//! Outer primal-dual training loops. `run_pdo` alternates one on-policy
//! primal step with one projected dual ascent step per epoch. `run_apdo`
//! additionally feeds every batch into a replay buffer and, at the
//! adjustment epoch, overwrites the multiplier with the off-policy estimate
//! trained from that buffer. `run_primal_dual_ddpg` runs the off-policy
//! learner standalone with exploration.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cmdp::{trajectory_cost, trajectory_return, DualState, Trajectory};
use crate::envs::Environment;
use crate::nn::NnError;
use crate::offpolicy::{
    train_lambda_off, OffPolicyConfig, OffPolicyError, OffPolicyLearner, ReplayBuffer,
};
use crate::onpolicy::{
    lagrangian_policy_gradient, policy_update, sample_batch, GaeConfig, SoftmaxPolicy, StepConfig,
    ValueBaseline,
};
use crate::seeding::{stream, StreamId};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Policy(#[from] NnError),
    #[error(transparent)]
    OffPolicy(#[from] OffPolicyError),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFiniteMetric { epoch: usize, what: &'static str },
}

/// Knobs for one primal-dual on-policy run.
#[derive(Debug, Clone)]
pub struct PdoConfig {
    pub step: StepConfig,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gae: GaeConfig,
    pub normalize_advantages: bool,
}

impl Default for PdoConfig {
    fn default() -> Self {
        Self {
            step: StepConfig { alpha: 0.5, ..Default::default() },
            beta: 0.1,
            epochs: 300,
            batch_size: 3000,
            gae: GaeConfig::default(),
            normalize_advantages: true,
        }
    }
}

/// PDO plus the adjustment epoch and the off-policy training knobs.
#[derive(Debug, Clone)]
pub struct ApdoConfig {
    pub pdo: PdoConfig,
    pub k_adj: usize,
    pub off: OffPolicyConfig,
}

impl Default for ApdoConfig {
    fn default() -> Self {
        Self { pdo: PdoConfig::default(), k_adj: 5, off: OffPolicyConfig::default() }
    }
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epoch: usize,
    pub avg_return: f64,
    pub avg_costs: Vec<f64>,
    pub lambda: Vec<f64>,
    pub samples: usize,
    pub wall_s: f64,
    pub adjusted: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub policy: SoftmaxPolicy,
    pub lambda_off: Option<Vec<f64>>,
}

/// Batch estimate of `C_i(pi) - d_i`: the mean discounted trajectory cost
/// per channel, minus the limit.
pub fn estimate_constraint_gap(batch: &[Trajectory], gamma: f64, limits: &[f64]) -> Vec<f64> {
    assert!(!batch.is_empty(), "empty batch");
    let mut mean = vec![0.0; limits.len()];
    for traj in batch {
        for (m, c) in mean.iter_mut().zip(trajectory_cost(traj, gamma)) {
            *m += c / batch.len() as f64;
        }
    }
    mean.iter().zip(limits).map(|(c, d)| c - d).collect()
}

/// Projected dual gradient ascent `lambda_i <- [lambda_i + beta * gap_i]+`.
pub fn dual_ascent_step(dual: &mut DualState, gap: &[f64], beta: f64) {
    assert!(beta >= 0.0, "beta must be non-negative");
    dual.ascend(gap, beta);
}

fn batch_stats(batch: &[Trajectory], gamma: f64, m: usize) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let avg_return = batch.iter().map(|t| trajectory_return(t, gamma)).sum::<f64>() / n;
    let mut avg_costs = vec![0.0; m];
    for traj in batch {
        for (a, c) in avg_costs.iter_mut().zip(trajectory_cost(traj, gamma)) {
            *a += c / n;
        }
    }
    (avg_return, avg_costs)
}

fn check_finite(record: &RunRecord) -> Result<(), DriverError> {
    let epoch = record.epoch;
    if !record.avg_return.is_finite() {
        return Err(DriverError::NonFiniteMetric { epoch, what: "average return" });
    }
    if record.avg_costs.iter().any(|c| !c.is_finite()) {
        return Err(DriverError::NonFiniteMetric { epoch, what: "average cost" });
    }
    if record.lambda.iter().any(|l| !l.is_finite()) {
        return Err(DriverError::NonFiniteMetric { epoch, what: "dual variable" });
    }
    Ok(())
}

fn run_primal_dual<E: Environment>(
    env: &mut E,
    mut policy: SoftmaxPolicy,
    mut baseline: ValueBaseline,
    cfg: &PdoConfig,
    adjustment: Option<(usize, &OffPolicyConfig)>,
    master_seed: u64,
) -> Result<RunOutput, DriverError> {
    assert!(cfg.beta >= 0.0, "beta must be non-negative");
    let start = Instant::now();
    let limits = env.limits().to_vec();
    let gamma = cfg.gae.gamma;
    let mut dual = DualState::new(limits.len());
    let mut sampling_rng = stream(master_seed, StreamId::Sampling);
    let mut fit_rng = stream(master_seed, StreamId::ValueInit);
    let mut buffer = adjustment.map(|(_, off)| ReplayBuffer::new(off.buffer_capacity));
    let mut lambda_off = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lambda_at_start = dual.lambda().to_vec();
        let label = match adjustment {
            Some(_) => format!("apdo-epoch{epoch}"),
            None => format!("pdo-epoch{epoch}"),
        };
        let batch = sample_batch(env, &policy, cfg.batch_size, &label, master_seed, &mut sampling_rng);
        if let Some(buffer) = buffer.as_mut() {
            buffer.extend_from_batch(&batch);
        }
        let (avg_return, avg_costs) = batch_stats(&batch, gamma, limits.len());

        let gradient = lagrangian_policy_gradient(
            &batch,
            &policy,
            &baseline,
            dual.lambda(),
            &cfg.gae,
            cfg.normalize_advantages,
        );
        policy_update(&mut policy, gradient, &cfg.step)?;
        baseline.fit(&batch, gamma, &mut fit_rng);

        let gap = estimate_constraint_gap(&batch, gamma, &limits);
        dual_ascent_step(&mut dual, &gap, cfg.beta);

        let mut adjusted = false;
        if let Some((k_adj, off_cfg)) = adjustment {
            if epoch == k_adj {
                let buffer = buffer.as_ref().expect("buffer exists for adjustment runs");
                let mut off_rng = stream(master_seed, StreamId::OffPolicy);
                let outcome = train_lambda_off(
                    buffer,
                    off_cfg,
                    env.feature_dim(),
                    env.num_actions(),
                    gamma,
                    &limits,
                    dual.lambda(),
                    &mut off_rng,
                )?;
                dual.overwrite(&outcome.lambda_off);
                lambda_off = Some(outcome.lambda_off);
                adjusted = true;
            }
        }

        let record = RunRecord {
            epoch,
            avg_return,
            avg_costs,
            lambda: lambda_at_start,
            samples: (epoch + 1) * cfg.batch_size,
            wall_s: start.elapsed().as_secs_f64(),
            adjusted,
        };
        check_finite(&record)?;
        records.push(record);
    }
    Ok(RunOutput { records, policy, lambda_off })
}

/// Primal-dual optimization: per epoch, one on-policy batch, one clipped
/// gradient ascent step on the Lagrangian at the current multiplier, one
/// projected dual ascent step on the estimated constraint gap.
pub fn run_pdo<E: Environment>(
    env: &mut E,
    policy: SoftmaxPolicy,
    baseline: ValueBaseline,
    cfg: &PdoConfig,
    master_seed: u64,
) -> Result<RunOutput, DriverError> {
    run_primal_dual(env, policy, baseline, cfg, None, master_seed)
}

/// PDO plus the one-time dual adjustment: every batch is also pushed into a
/// replay buffer, and at the end of epoch `k_adj` (after that epoch's dual
/// ascent step) the multiplier is overwritten with the off-policy estimate
/// trained on the buffer, warm-started from the current multiplier.
pub fn run_apdo<E: Environment>(
    env: &mut E,
    policy: SoftmaxPolicy,
    baseline: ValueBaseline,
    cfg: &ApdoConfig,
    master_seed: u64,
) -> Result<RunOutput, DriverError> {
    run_primal_dual(env, policy, baseline, &cfg.pdo, Some((cfg.k_adj, &cfg.off)), master_seed)
}

/// The off-policy learner run as its own agent: per epoch it explores with
/// Gaussian logit noise for `batch_size` steps (filling the buffer), then
/// performs its share of the `off_iterations` learning updates. Reported
/// returns and costs are those of the exploration batch.
pub fn run_primal_dual_ddpg<E: Environment>(
    env: &mut E,
    cfg: &PdoConfig,
    off_cfg: &OffPolicyConfig,
    master_seed: u64,
) -> Result<Vec<RunRecord>, DriverError> {
    let start = Instant::now();
    let limits = env.limits().to_vec();
    if limits.len() != 1 {
        return Err(OffPolicyError::MultiConstraint { channels: limits.len() }.into());
    }
    let gamma = cfg.gae.gamma;
    let mut sampling_rng = stream(master_seed, StreamId::Sampling);
    let mut off_rng = stream(master_seed, StreamId::OffPolicy);
    let mut learner = OffPolicyLearner::new(
        env.feature_dim(),
        env.num_actions(),
        gamma,
        limits[0],
        0.0,
        off_cfg.clone(),
        &mut stream(master_seed, StreamId::PolicyInit),
    );
    let mut buffer = ReplayBuffer::new(off_cfg.buffer_capacity);
    let updates_per_epoch = if cfg.epochs == 0 {
        0
    } else {
        off_cfg.off_iterations.div_ceil(cfg.epochs)
    };
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lambda_at_start = vec![learner.lambda];
        let batch = explore_batch(env, &learner, cfg.batch_size, epoch, master_seed, &mut sampling_rng);
        buffer.extend_from_batch(&batch);
        let (avg_return, avg_costs) = batch_stats(&batch, gamma, 1);
        for _ in 0..updates_per_epoch {
            learner.step(&buffer, &mut off_rng)?;
        }
        let record = RunRecord {
            epoch,
            avg_return,
            avg_costs,
            lambda: lambda_at_start,
            samples: (epoch + 1) * cfg.batch_size,
            wall_s: start.elapsed().as_secs_f64(),
            adjusted: false,
        };
        check_finite(&record)?;
        records.push(record);
    }
    Ok(records)
}

fn explore_batch<E: Environment>(
    env: &mut E,
    learner: &OffPolicyLearner,
    batch_size: usize,
    epoch: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<Trajectory> {
    use crate::cmdp::Transition;
    let mut batch = Vec::new();
    let mut total = 0;
    while total < batch_size {
        let mut state = env.reset(rng);
        let mut transitions = Vec::new();
        loop {
            let action = learner.explore_action(&state.features, rng);
            let out = env.step(action, rng);
            transitions.push(Transition {
                state,
                action,
                reward: out.reward,
                cost_vector: out.costs,
                next_state: out.next.clone(),
                terminal: out.done,
            });
            state = out.next;
            total += 1;
            if out.done || transitions.len() >= env.max_episode_steps() || total == batch_size {
                break;
            }
        }
        batch.push(Trajectory {
            transitions,
            policy_id: format!("ddpg-explore-epoch{epoch}"),
            seed,
        });
    }
    batch
}
