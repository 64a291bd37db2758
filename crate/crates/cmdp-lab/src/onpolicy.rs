//! On-policy likelihood-ratio policy gradient on the Lagrangian objective:
//! softmax policies (tabular or MLP), GAE advantage estimation per reward
//! and cost channel, and a clipped fixed-step ascent update.

use rand_chacha::ChaCha8Rng;

use crate::cmdp::{StateRepr, Trajectory, Transition};
use crate::envs::Environment;
use crate::nn::{sample_categorical, softmax, Mlp, NnError};

/// Stochastic policy `pi(a|s) = softmax(logits(s))`, parameterized either by
/// a per-state logit table or by an MLP over state features.
#[derive(Debug, Clone)]
pub enum SoftmaxPolicy {
    Tabular { logits: Vec<Vec<f64>> },
    Net { net: Mlp },
}

impl SoftmaxPolicy {
    /// Tabular policy with every state's logits copied from `init_logits`.
    pub fn tabular(num_states: usize, init_logits: &[f64]) -> Self {
        Self::Tabular { logits: vec![init_logits.to_vec(); num_states] }
    }

    /// MLP policy: `feature_dim -> hidden... -> num_actions` logits.
    pub fn mlp(feature_dim: usize, hidden: &[usize], num_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![feature_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        Self::Net { net: Mlp::new(&sizes, rng) }
    }

    pub fn probs(&self, state: &StateRepr) -> Vec<f64> {
        match self {
            Self::Tabular { logits } => softmax(&logits[state.id]),
            Self::Net { net } => softmax(&net.forward(&state.features)),
        }
    }

    pub fn sample(&self, state: &StateRepr, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(&self.probs(state), rng)
    }
}

/// Ascent direction with the same shape as the policy parameters.
#[derive(Debug, Clone)]
pub enum PolicyGradient {
    Tabular(Vec<Vec<f64>>),
    Net { weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>> },
}

impl PolicyGradient {
    fn components(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            Self::Tabular(rows) => Box::new(rows.iter().flatten().copied()),
            Self::Net { weights, biases } => {
                Box::new(weights.iter().flatten().chain(biases.iter().flatten()).copied())
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.components().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        let apply = |rows: &mut Vec<Vec<f64>>| {
            for row in rows {
                for g in row {
                    *g *= factor;
                }
            }
        };
        match self {
            Self::Tabular(rows) => apply(rows),
            Self::Net { weights, biases } => {
                apply(weights);
                apply(biases);
            }
        }
    }
}

/// Fixed-step ascent configuration: step size, gradient norm clip, and an
/// optional decay pulling parameters toward zero.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub alpha: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { alpha: 0.1, grad_clip: 10.0, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GaeConfig {
    pub gae_lambda: f64,
    pub gamma: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gae_lambda: 0.95, gamma: 0.995 }
    }
}

/// State-value estimator per channel (channel 0 is reward, channel `i >= 1`
/// is cost channel `i-1`), fit to discounted returns-to-go.
#[derive(Debug, Clone)]
pub enum ValueBaseline {
    /// `values[channel][state_id]`, refit to the per-state mean.
    Tabular { values: Vec<Vec<f64>> },
    /// One network with `1 + m` outputs over state features.
    Net { net: Mlp, fit_iters: usize, lr: f64, minibatch: usize },
}

impl ValueBaseline {
    pub fn tabular(num_states: usize, num_channels: usize) -> Self {
        Self::Tabular { values: vec![vec![0.0; num_states]; num_channels] }
    }

    pub fn mlp(
        feature_dim: usize,
        hidden: &[usize],
        num_channels: usize,
        fit_iters: usize,
        lr: f64,
        minibatch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut sizes = vec![feature_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_channels);
        Self::Net { net: Mlp::new(&sizes, rng), fit_iters, lr, minibatch }
    }

    pub fn value(&self, state: &StateRepr, channel: usize) -> f64 {
        match self {
            Self::Tabular { values } => values[channel][state.id],
            Self::Net { net, .. } => net.forward(&state.features)[channel],
        }
    }

    /// Refits to the batch: discounted returns-to-go are computed per
    /// channel within each trajectory (suffix sums, so estimates at a
    /// truncation cut are biased low; acceptable for a baseline).
    pub fn fit(&mut self, batch: &[Trajectory], gamma: f64, rng: &mut ChaCha8Rng) {
        let targets: Vec<(&StateRepr, Vec<f64>)> = batch
            .iter()
            .flat_map(|traj| {
                let rtg = returns_to_go(traj, gamma);
                traj.transitions.iter().map(|t| &t.state).zip(rtg).collect::<Vec<_>>()
            })
            .collect();
        match self {
            Self::Tabular { values } => {
                let num_channels = values.len();
                let num_states = values[0].len();
                let mut sums = vec![vec![0.0; num_states]; num_channels];
                let mut counts = vec![0usize; num_states];
                for (state, target) in &targets {
                    counts[state.id] += 1;
                    for (ch, &x) in target.iter().enumerate() {
                        sums[ch][state.id] += x;
                    }
                }
                for s in 0..num_states {
                    if counts[s] > 0 {
                        for ch in 0..num_channels {
                            values[ch][s] = sums[ch][s] / counts[s] as f64;
                        }
                    }
                }
            }
            Self::Net { net, fit_iters, lr, minibatch } => {
                use rand::Rng;
                let mut adam = crate::nn::AdamState::new(net);
                for _ in 0..*fit_iters {
                    let (mut gw, mut gb) = net.zero_grads();
                    let n = (*minibatch).min(targets.len());
                    for _ in 0..n {
                        let (state, target) = &targets[rng.gen_range(0..targets.len())];
                        let cache = net.forward_cached(&state.features);
                        let gout: Vec<f64> = cache
                            .output()
                            .iter()
                            .zip(target)
                            .map(|(o, t)| 2.0 * (o - t) / n as f64)
                            .collect();
                        net.backward(&cache, &gout, &mut gw, &mut gb);
                    }
                    crate::nn::adam_step(net, &gw, &gb, &mut adam, *lr, "baseline")
                        .expect("finite baseline fit");
                }
            }
        }
    }
}

/// Per-step discounted returns-to-go for every channel: `out[t][0]` is the
/// reward suffix sum, `out[t][1 + i]` cost channel `i`.
fn returns_to_go(traj: &Trajectory, gamma: f64) -> Vec<Vec<f64>> {
    let m = traj.transitions.first().map_or(0, |t| t.cost_vector.len());
    let n = traj.len();
    let mut out = vec![vec![0.0; 1 + m]; n];
    let mut acc = vec![0.0; 1 + m];
    for t in (0..n).rev() {
        let tr = &traj.transitions[t];
        acc[0] = tr.reward + gamma * acc[0];
        for i in 0..m {
            acc[1 + i] = tr.cost_vector[i] + gamma * acc[1 + i];
        }
        out[t].copy_from_slice(&acc);
    }
    out
}

/// Samples whole episodes under the policy until exactly `batch_size`
/// transitions are collected; the final episode is cut at the boundary
/// (its last transition keeps `terminal = false` so values bootstrap).
pub fn sample_batch<E: Environment>(
    env: &mut E,
    policy: &SoftmaxPolicy,
    batch_size: usize,
    policy_id: &str,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<Trajectory> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut batch = Vec::new();
    let mut total = 0;
    while total < batch_size {
        let mut state = env.reset(rng);
        let mut transitions = Vec::new();
        loop {
            let action = policy.sample(&state, rng);
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
        batch.push(Trajectory { transitions, policy_id: policy_id.to_string(), seed });
    }
    batch
}

/// GAE over one trajectory for one channel:
/// `A_t = sum_l (gamma * lambda)^l delta_{t+l}` with
/// `delta_t = x_t + gamma * V(s_{t+1}) - V(s_t)` and `V(terminal) = 0`.
pub fn gae_advantages(
    traj: &Trajectory,
    baseline: &ValueBaseline,
    cfg: &GaeConfig,
    channel: usize,
) -> Vec<f64> {
    let n = traj.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let tr = &traj.transitions[t];
        let x = if channel == 0 { tr.reward } else { tr.cost_vector[channel - 1] };
        let v_next =
            if tr.terminal { 0.0 } else { baseline.value(&tr.next_state, channel) };
        let delta = x + cfg.gamma * v_next - baseline.value(&tr.state, channel);
        acc = delta + cfg.gamma * cfg.gae_lambda * acc;
        advantages[t] = acc;
    }
    advantages
}

fn normalize_in_place(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// REINFORCE estimate of the Lagrangian gradient over a batch:
/// `(1/T) sum_t grad log pi(a_t|s_t) * (A^R_t - sum_i lambda_i A^{C_i}_t)`,
/// with per-channel GAE advantages and optional per-batch normalization of
/// each channel before the combination.
pub fn lagrangian_policy_gradient(
    batch: &[Trajectory],
    policy: &SoftmaxPolicy,
    baseline: &ValueBaseline,
    lambda: &[f64],
    cfg: &GaeConfig,
    normalize: bool,
) -> PolicyGradient {
    let total: usize = batch.iter().map(Trajectory::len).sum();
    assert!(total > 0, "empty batch");
    let m = lambda.len();

    let mut channels: Vec<Vec<f64>> = (0..=m)
        .map(|ch| batch.iter().flat_map(|traj| gae_advantages(traj, baseline, cfg, ch)).collect())
        .collect();
    if normalize {
        for ch in &mut channels {
            normalize_in_place(ch);
        }
    }
    let weights: Vec<f64> = (0..total)
        .map(|t| channels[0][t] - lambda.iter().enumerate().map(|(i, &l)| l * channels[1 + i][t]).sum::<f64>())
        .collect();

    let scale = 1.0 / total as f64;
    match policy {
        SoftmaxPolicy::Tabular { logits } => {
            let mut grad = vec![vec![0.0; logits[0].len()]; logits.len()];
            for (tr, &w) in batch.iter().flat_map(|t| t.transitions.iter()).zip(&weights) {
                let pi = softmax(&logits[tr.state.id]);
                let row = &mut grad[tr.state.id];
                for (a, &p) in pi.iter().enumerate() {
                    let indicator = if a == tr.action { 1.0 } else { 0.0 };
                    row[a] += scale * (indicator - p) * w;
                }
            }
            PolicyGradient::Tabular(grad)
        }
        SoftmaxPolicy::Net { net } => {
            let (mut gw, mut gb) = net.zero_grads();
            for (tr, &w) in batch.iter().flat_map(|t| t.transitions.iter()).zip(&weights) {
                let cache = net.forward_cached(&tr.state.features);
                let pi = softmax(cache.output());
                let gout: Vec<f64> = pi
                    .iter()
                    .enumerate()
                    .map(|(a, &p)| {
                        let indicator = if a == tr.action { 1.0 } else { 0.0 };
                        scale * (indicator - p) * w
                    })
                    .collect();
                net.backward(&cache, &gout, &mut gw, &mut gb);
            }
            PolicyGradient::Net { weights: gw, biases: gb }
        }
    }
}

/// Clipped fixed-step ascent: the gradient's global l2 norm is clipped,
/// the decay term is subtracted, and parameters move by `alpha` times the
/// result. Fails if any parameter becomes non-finite.
pub fn policy_update(
    policy: &mut SoftmaxPolicy,
    mut gradient: PolicyGradient,
    cfg: &StepConfig,
) -> Result<(), NnError> {
    let norm = gradient.l2_norm();
    if norm > cfg.grad_clip {
        gradient.scale(cfg.grad_clip / norm);
    }
    let step = |params: &mut Vec<Vec<f64>>, grads: &[Vec<f64>], kind: &'static str| {
        for (layer, (p_row, g_row)) in params.iter_mut().zip(grads).enumerate() {
            for (index, (p, &g)) in p_row.iter_mut().zip(g_row).enumerate() {
                *p += cfg.alpha * (g - cfg.weight_decay * *p);
                if !p.is_finite() {
                    return Err(NnError::NonFinite { net: "policy".into(), kind, layer, index });
                }
            }
        }
        Ok(())
    };
    match (policy, gradient) {
        (SoftmaxPolicy::Tabular { logits }, PolicyGradient::Tabular(grad)) => {
            step(logits, &grad, "logit")
        }
        (SoftmaxPolicy::Net { net }, PolicyGradient::Net { weights, biases }) => {
            step(&mut net.weights, &weights, "weight")?;
            step(&mut net.biases, &biases, "bias")
        }
        _ => panic!("gradient shape does not match the policy parameterization"),
    }
}
