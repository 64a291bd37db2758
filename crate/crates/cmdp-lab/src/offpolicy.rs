//! Off-policy primal-dual learning on replayed transitions: a FIFO replay
//! buffer, twin reward/cost critics with target networks, a softmax actor,
//! and a projected dual ascent whose trace average gives the off-policy
//! multiplier estimate.
//!
//! Actions are discrete, so the deterministic-actor updates are taken in
//! expectation: every `Q(s, mu(s))` term is `sum_a pi(a|s) Q(s, a)` with
//! `pi = softmax(actor(s))`, and actor gradients flow through these weights.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cmdp::{Trajectory, Transition};
use crate::nn::{adam_step, soft_update, softmax, AdamState, Mlp, NnError};

#[derive(Debug, Error)]
pub enum OffPolicyError {
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("off-policy training supports exactly one cost channel, got {channels}")]
    MultiConstraint { channels: usize },
    #[error(transparent)]
    NonFinite(#[from] NnError),
}

/// Fixed-capacity FIFO transition store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    /// Appends one transition, evicting the oldest when full.
    pub fn push(&mut self, transition: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
    }

    pub fn extend_from_batch(&mut self, batch: &[Trajectory]) {
        for traj in batch {
            for tr in &traj.transitions {
                self.push(tr.clone());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of `n` transitions with replacement.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>, OffPolicyError> {
        if self.items.is_empty() {
            return Err(OffPolicyError::EmptyBuffer);
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct OffPolicyConfig {
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub dual_lr_off: f64,
    pub off_iterations: usize,
    pub explore_sigma: f64,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub actor_weight_decay: f64,
}

impl Default for OffPolicyConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 100_000,
            minibatch: 64,
            tau: 0.001,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            dual_lr_off: 1e-2,
            off_iterations: 50_000,
            explore_sigma: 0.1,
            critic_hidden: vec![100, 100],
            actor_hidden: vec![64, 32],
            actor_weight_decay: 0.0,
        }
    }
}

/// Actor, reward critic, cost critic, and their target copies. Critics map
/// state features to one Q-value per action; the actor maps features to
/// action logits.
#[derive(Debug, Clone)]
pub struct PdDdpgNets {
    pub actor: Mlp,
    pub critic_r: Mlp,
    pub critic_c: Mlp,
    pub target_actor: Mlp,
    pub target_critic_r: Mlp,
    pub target_critic_c: Mlp,
}

impl PdDdpgNets {
    pub fn new(
        feature_dim: usize,
        num_actions: usize,
        cfg: &OffPolicyConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let sizes = |hidden: &[usize]| {
            let mut s = vec![feature_dim];
            s.extend_from_slice(hidden);
            s.push(num_actions);
            s
        };
        let actor = Mlp::new(&sizes(&cfg.actor_hidden), rng);
        let critic_r = Mlp::new(&sizes(&cfg.critic_hidden), rng);
        let critic_c = Mlp::new(&sizes(&cfg.critic_hidden), rng);
        Self {
            target_actor: actor.clone(),
            target_critic_r: critic_r.clone(),
            target_critic_c: critic_c.clone(),
            actor,
            critic_r,
            critic_c,
        }
    }

    pub fn soft_update_targets(&mut self, tau: f64) {
        soft_update(&mut self.target_actor, &self.actor, tau);
        soft_update(&mut self.target_critic_r, &self.critic_r, tau);
        soft_update(&mut self.target_critic_c, &self.critic_c, tau);
    }
}

/// History of the off-policy dual variable, one entry per update.
#[derive(Debug, Clone, Default)]
pub struct DualTrace {
    pub values: Vec<f64>,
}

impl DualTrace {
    pub fn mean(&self) -> f64 {
        assert!(!self.values.is_empty(), "empty dual trace");
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `sum_a softmax(actor(s))_a * Q(s, a)`: the discrete stand-in for
/// `Q(s, mu(s))`.
fn expected_q(critic: &Mlp, actor: &Mlp, features: &[f64]) -> f64 {
    let pi = softmax(&actor.forward(features));
    critic.forward(features).iter().zip(&pi).map(|(q, p)| q * p).sum()
}

/// Bootstrapped regression targets from the target networks:
/// `y_i = r_i + gamma * Q'_R(s', mu'(s'))` and the analogue `z_i` for cost,
/// with the bootstrap term dropped on terminal transitions.
pub fn critic_targets(
    batch: &[&Transition],
    nets: &PdDdpgNets,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    batch
        .iter()
        .map(|tr| {
            if tr.terminal {
                (tr.reward, tr.cost_vector[0])
            } else {
                let f = &tr.next_state.features;
                (
                    tr.reward + gamma * expected_q(&nets.target_critic_r, &nets.target_actor, f),
                    tr.cost_vector[0]
                        + gamma * expected_q(&nets.target_critic_c, &nets.target_actor, f),
                )
            }
        })
        .unzip()
}

/// One Adam step on the mean-squared error between `Q(s_i, a_i)` and the
/// targets; only the taken action's output receives gradient. Returns the
/// loss before the step.
pub fn critic_update(
    critic: &mut Mlp,
    adam: &mut AdamState,
    batch: &[&Transition],
    targets: &[f64],
    lr: f64,
    name: &str,
) -> Result<f64, NnError> {
    let n = batch.len();
    let (mut gw, mut gb) = critic.zero_grads();
    let mut loss = 0.0;
    for (tr, &target) in batch.iter().zip(targets) {
        let cache = critic.forward_cached(&tr.state.features);
        let q = cache.output()[tr.action];
        loss += (target - q).powi(2) / n as f64;
        let mut gout = vec![0.0; cache.output().len()];
        gout[tr.action] = 2.0 * (q - target) / n as f64;
        critic.backward(&cache, &gout, &mut gw, &mut gb);
    }
    adam_step(critic, &gw, &gb, adam, lr, name)?;
    Ok(loss)
}

/// Actor ascent on `(1/N) sum_i sum_a pi(a|s_i) [Q_R - lambda Q_C](s_i, a)`
/// followed by the projected dual step
/// `lambda <- [lambda + eta ((1/N) sum_i Q_C(s_i, mu(s_i)) - d)]+` computed
/// with the freshly updated actor. Returns the new multiplier.
pub fn actor_dual_update(
    actor: &mut Mlp,
    critic_r: &Mlp,
    critic_c: &Mlp,
    adam: &mut AdamState,
    batch: &[&Transition],
    lambda: f64,
    limit: f64,
    cfg: &OffPolicyConfig,
) -> Result<f64, NnError> {
    let n = batch.len() as f64;
    let (mut gw, mut gb) = actor.zero_grads();
    for tr in batch {
        let f = &tr.state.features;
        let cache = actor.forward_cached(f);
        let pi = softmax(cache.output());
        let qr = critic_r.forward(f);
        let qc = critic_c.forward(f);
        let adv: Vec<f64> = qr.iter().zip(&qc).map(|(r, c)| r - lambda * c).collect();
        let mean_adv: f64 = pi.iter().zip(&adv).map(|(p, a)| p * a).sum();
        // Minimize the negated objective; d/dlogit_a of sum_b pi_b adv_b
        // is pi_a (adv_a - sum_b pi_b adv_b).
        let gout: Vec<f64> =
            pi.iter().zip(&adv).map(|(p, a)| -p * (a - mean_adv) / n).collect();
        actor.backward(&cache, &gout, &mut gw, &mut gb);
    }
    if cfg.actor_weight_decay > 0.0 {
        for (g_row, w_row) in gw.iter_mut().zip(&actor.weights) {
            for (g, w) in g_row.iter_mut().zip(w_row) {
                *g += cfg.actor_weight_decay * w;
            }
        }
        for (g_row, b_row) in gb.iter_mut().zip(&actor.biases) {
            for (g, b) in g_row.iter_mut().zip(b_row) {
                *g += cfg.actor_weight_decay * b;
            }
        }
    }
    adam_step(actor, &gw, &gb, adam, cfg.actor_lr, "actor")?;

    let mean_qc: f64 = batch
        .iter()
        .map(|tr| expected_q(critic_c, actor, &tr.state.features))
        .sum::<f64>()
        / n;
    Ok((lambda + cfg.dual_lr_off * (mean_qc - limit)).max(0.0))
}

/// One primal-dual DDPG learner: owns the networks, their optimizers, the
/// dual variable, and its trace.
#[derive(Debug, Clone)]
pub struct OffPolicyLearner {
    pub nets: PdDdpgNets,
    adam_r: AdamState,
    adam_c: AdamState,
    adam_actor: AdamState,
    pub lambda: f64,
    pub trace: DualTrace,
    cfg: OffPolicyConfig,
    gamma: f64,
    limit: f64,
}

impl OffPolicyLearner {
    pub fn new(
        feature_dim: usize,
        num_actions: usize,
        gamma: f64,
        limit: f64,
        lambda_init: f64,
        cfg: OffPolicyConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let nets = PdDdpgNets::new(feature_dim, num_actions, &cfg, rng);
        Self {
            adam_r: AdamState::new(&nets.critic_r),
            adam_c: AdamState::new(&nets.critic_c),
            adam_actor: AdamState::new(&nets.actor),
            nets,
            lambda: lambda_init.max(0.0),
            trace: DualTrace::default(),
            cfg,
            gamma,
            limit,
        }
    }

    /// One full learning iteration on a sampled minibatch: critic targets,
    /// both critic updates, actor and dual updates, soft target tracking.
    pub fn step(&mut self, buffer: &ReplayBuffer, rng: &mut ChaCha8Rng) -> Result<(), OffPolicyError> {
        let batch = buffer.sample(self.cfg.minibatch, rng)?;
        let (y, z) = critic_targets(&batch, &self.nets, self.gamma);
        critic_update(&mut self.nets.critic_r, &mut self.adam_r, &batch, &y, self.cfg.critic_lr, "critic_r")?;
        critic_update(&mut self.nets.critic_c, &mut self.adam_c, &batch, &z, self.cfg.critic_lr, "critic_c")?;
        self.lambda = actor_dual_update(
            &mut self.nets.actor,
            &self.nets.critic_r,
            &self.nets.critic_c,
            &mut self.adam_actor,
            &batch,
            self.lambda,
            self.limit,
            &self.cfg,
        )?;
        self.trace.values.push(self.lambda);
        self.nets.soft_update_targets(self.cfg.tau);
        Ok(())
    }

    /// Behavior action for exploration: Gaussian noise on the logits, then
    /// a categorical draw.
    pub fn explore_action(&self, features: &[f64], rng: &mut ChaCha8Rng) -> usize {
        use rand_distr::{Distribution, StandardNormal};
        let mut logits = self.nets.actor.forward(features);
        for l in &mut logits {
            let eps: f64 = StandardNormal.sample(rng);
            *l += self.cfg.explore_sigma * eps;
        }
        crate::nn::sample_categorical(&softmax(&logits), rng)
    }
}

#[derive(Debug, Clone)]
pub struct OffPolicyOutcome {
    pub lambda_off: Vec<f64>,
    pub trace: DualTrace,
}

/// Trains a primal-dual learner purely on replayed transitions (no fresh
/// environment interaction) and returns the historical average of the dual
/// trace as the off-policy multiplier estimate.
pub fn train_lambda_off(
    buffer: &ReplayBuffer,
    cfg: &OffPolicyConfig,
    feature_dim: usize,
    num_actions: usize,
    gamma: f64,
    limits: &[f64],
    lambda_init: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<OffPolicyOutcome, OffPolicyError> {
    if limits.len() != 1 {
        return Err(OffPolicyError::MultiConstraint { channels: limits.len() });
    }
    if buffer.is_empty() {
        return Err(OffPolicyError::EmptyBuffer);
    }
    let mut learner = OffPolicyLearner::new(
        feature_dim,
        num_actions,
        gamma,
        limits[0],
        lambda_init[0],
        cfg.clone(),
        rng,
    );
    for _ in 0..cfg.off_iterations {
        learner.step(buffer, rng)?;
    }
    Ok(OffPolicyOutcome { lambda_off: vec![learner.trace.mean()], trace: learner.trace })
}
