//! CMDP data model and exact / Monte-Carlo evaluation of discounted
//! long-term reward and cost.
//!
//! A [`TabularCmdp`] is a finite MDP augmented with `m` cost channels and
//! per-channel limits: the feasible policies are those whose long-term
//! discounted cost stays within the limits on every channel. Internally the
//! transition structure is stored sparsely per `(state, action)`; the JSON
//! interchange format uses dense row-major tensors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PROB_TOL: f64 = 1e-12;

/// Validation failures when constructing a [`TabularCmdp`].
#[derive(Debug, Error)]
pub enum CmdpError {
    #[error("transition row for state {state}, action {action} sums to {sum}, expected 1")]
    RowNotStochastic { state: usize, action: usize, sum: f64 },
    #[error("negative probability {value} at state {state}, action {action}")]
    NegativeProbability { state: usize, action: usize, value: f64 },
    #[error("initial distribution sums to {sum}, expected 1")]
    InitialDistNotStochastic { sum: f64 },
    #[error("gamma must lie in [0, 1), got {0}")]
    GammaOutOfRange(f64),
    #[error("{limits} limits provided for {channels} cost channels")]
    LimitsMismatch { limits: usize, channels: usize },
    #[error("tensor {name} has shape inconsistent with {expected} states / {actions} actions")]
    ShapeMismatch { name: &'static str, expected: usize, actions: usize },
    #[error("successor {next} out of range for state {state}, action {action}")]
    BadSuccessor { state: usize, action: usize, next: usize },
    #[error("transition entry carries {got} cost channels, expected {expected}")]
    CostArity { got: usize, expected: usize },
}

/// One entry of a sparse transition row: successor state, probability and
/// the reward / per-channel cost collected on that transition.
#[derive(Debug, Clone)]
pub struct SparseTransition {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
    pub costs: Vec<f64>,
}

/// A complete finite CMDP: states, actions, transition kernel, reward,
/// cost channels with limits, discount and initial distribution.
#[derive(Debug, Clone)]
pub struct TabularCmdp {
    num_states: usize,
    num_actions: usize,
    rows: Vec<Vec<Vec<SparseTransition>>>,
    limits: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
}

/// Dense JSON document for a [`TabularCmdp`]; all tensors row-major nested
/// arrays indexed `[state][action][next_state]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularCmdpDoc {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
    pub costs: Vec<Vec<Vec<Vec<f64>>>>,
    pub limits: Vec<f64>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
}

impl TabularCmdp {
    /// Builds a CMDP from dense tensors, validating stochasticity of the
    /// transition rows and initial distribution, `gamma < 1` and the
    /// limits/channels correspondence.
    pub fn from_dense(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<Vec<f64>>>,
        costs: Vec<Vec<Vec<Vec<f64>>>>,
        limits: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self, CmdpError> {
        let num_states = transition.len();
        let num_actions = transition.first().map_or(0, |row| row.len());
        if !(0.0..1.0).contains(&gamma) {
            return Err(CmdpError::GammaOutOfRange(gamma));
        }
        if limits.len() != costs.len() {
            return Err(CmdpError::LimitsMismatch { limits: limits.len(), channels: costs.len() });
        }
        let check_shape = |t: &Vec<Vec<Vec<f64>>>, name: &'static str| {
            let ok = t.len() == num_states
                && t.iter().all(|per_a| {
                    per_a.len() == num_actions && per_a.iter().all(|row| row.len() == num_states)
                });
            if ok {
                Ok(())
            } else {
                Err(CmdpError::ShapeMismatch { name, expected: num_states, actions: num_actions })
            }
        };
        check_shape(&transition, "transition")?;
        check_shape(&reward, "reward")?;
        for c in &costs {
            check_shape(c, "costs")?;
        }

        let rows: Vec<Vec<Vec<SparseTransition>>> = (0..num_states)
            .map(|s| {
                (0..num_actions)
                    .map(|a| {
                        (0..num_states)
                            .filter(|&next| transition[s][a][next] != 0.0)
                            .map(|next| SparseTransition {
                                next,
                                prob: transition[s][a][next],
                                reward: reward[s][a][next],
                                costs: costs.iter().map(|c| c[s][a][next]).collect(),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::from_sparse(num_states, num_actions, rows, limits, gamma, initial_dist)
    }

    /// Builds a CMDP directly from sparse transition rows indexed
    /// `rows[state][action]`, with the same validation as [`Self::from_dense`].
    pub fn from_sparse(
        num_states: usize,
        num_actions: usize,
        rows: Vec<Vec<Vec<SparseTransition>>>,
        limits: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self, CmdpError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CmdpError::GammaOutOfRange(gamma));
        }
        let m = limits.len();
        let shape_ok = rows.len() == num_states && rows.iter().all(|r| r.len() == num_actions);
        if !shape_ok {
            return Err(CmdpError::ShapeMismatch {
                name: "rows",
                expected: num_states,
                actions: num_actions,
            });
        }
        for (s, per_action) in rows.iter().enumerate() {
            for (a, entries) in per_action.iter().enumerate() {
                let mut sum = 0.0;
                for e in entries {
                    if e.prob < 0.0 {
                        return Err(CmdpError::NegativeProbability { state: s, action: a, value: e.prob });
                    }
                    if e.next >= num_states {
                        return Err(CmdpError::BadSuccessor { state: s, action: a, next: e.next });
                    }
                    if e.costs.len() != m {
                        return Err(CmdpError::CostArity { got: e.costs.len(), expected: m });
                    }
                    sum += e.prob;
                }
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(CmdpError::RowNotStochastic { state: s, action: a, sum });
                }
            }
        }
        if initial_dist.len() != num_states {
            return Err(CmdpError::ShapeMismatch {
                name: "initial_dist",
                expected: num_states,
                actions: num_actions,
            });
        }
        let p0_sum: f64 = initial_dist.iter().sum();
        if (p0_sum - 1.0).abs() > PROB_TOL || initial_dist.iter().any(|&p| p < 0.0) {
            return Err(CmdpError::InitialDistNotStochastic { sum: p0_sum });
        }
        Ok(Self { num_states, num_actions, rows, limits, gamma, initial_dist })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of cost channels `m`.
    pub fn num_cost_channels(&self) -> usize {
        self.limits.len()
    }

    pub fn limits(&self) -> &[f64] {
        &self.limits
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Largest absolute one-step reward in the model.
    pub fn max_abs_reward(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .flatten()
            .map(|e| e.reward.abs())
            .fold(0.0, f64::max)
    }

    /// Truncation horizon `H` such that `gamma^H * max|R| <= 1e-3`: the tail
    /// of any discounted return beyond `H` is below that bound.
    pub fn horizon(&self) -> usize {
        horizon_for(self.gamma, self.max_abs_reward())
    }

    /// Expected one-step reward and costs for `(s, a)`.
    pub fn expected_reward_costs(&self, s: usize, a: usize) -> (f64, Vec<f64>) {
        let mut r = 0.0;
        let mut c = vec![0.0; self.num_cost_channels()];
        for e in &self.rows[s][a] {
            r += e.prob * e.reward;
            for (ci, &ec) in c.iter_mut().zip(&e.costs) {
                *ci += e.prob * ec;
            }
        }
        (r, c)
    }

    /// Iterates the sparse transition row for `(s, a)` as
    /// `(next, prob, reward, costs)`.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64, f64, &[f64])> {
        self.rows[s][a].iter().map(|e| (e.next, e.prob, e.reward, e.costs.as_slice()))
    }

    /// Draws an initial state from the initial distribution.
    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_index(&self.initial_dist, rng)
    }

    /// Draws a successor for `(s, a)` and returns `(next, reward, costs)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> (usize, f64, Vec<f64>) {
        let row = &self.rows[s][a];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = row.len() - 1;
        for (i, e) in row.iter().enumerate() {
            acc += e.prob;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let e = &row[chosen];
        (e.next, e.reward, e.costs.clone())
    }

    /// Exact `(R(pi), C(pi))` for a stochastic tabular policy, by solving
    /// `(I - gamma * P_pi) V = r_pi` with a dense LU factorization (one
    /// decomposition, one solve per channel) and averaging over the initial
    /// distribution.
    pub fn evaluate_policy_exact(&self, policy: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let n = self.num_states;
        let m = self.num_cost_channels();
        assert_eq!(policy.len(), n, "policy must cover every state");
        let mut a_mat = DMatrix::<f64>::identity(n, n);
        let mut rhs = vec![DVector::<f64>::zeros(n); 1 + m];
        for s in 0..n {
            let pi = &policy[s];
            assert_eq!(pi.len(), self.num_actions, "policy row arity");
            for (act, &w) in pi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for e in &self.rows[s][act] {
                    a_mat[(s, e.next)] -= self.gamma * w * e.prob;
                    rhs[0][s] += w * e.prob * e.reward;
                    for (i, &c) in e.costs.iter().enumerate() {
                        rhs[1 + i][s] += w * e.prob * c;
                    }
                }
            }
        }
        let lu = a_mat.lu();
        let values: Vec<DVector<f64>> = rhs
            .into_iter()
            .map(|b| lu.solve(&b).expect("I - gamma*P_pi is invertible for gamma < 1"))
            .collect();
        let weigh = |v: &DVector<f64>| -> f64 {
            self.initial_dist.iter().zip(v.iter()).map(|(&p, &x)| p * x).sum()
        };
        let r = weigh(&values[0]);
        let c = values[1..].iter().map(weigh).collect();
        (r, c)
    }

    /// Dense interchange document for this CMDP.
    pub fn to_doc(&self) -> TabularCmdpDoc {
        let n = self.num_states;
        let k = self.num_actions;
        let m = self.num_cost_channels();
        let zeros = || vec![vec![vec![0.0; n]; k]; n];
        let mut transition = zeros();
        let mut reward = zeros();
        let mut costs = vec![zeros(); m];
        for s in 0..n {
            for a in 0..k {
                for e in &self.rows[s][a] {
                    transition[s][a][e.next] = e.prob;
                    reward[s][a][e.next] = e.reward;
                    for (i, &c) in e.costs.iter().enumerate() {
                        costs[i][s][a][e.next] = c;
                    }
                }
            }
        }
        TabularCmdpDoc {
            num_states: n,
            num_actions: k,
            transition,
            reward,
            costs,
            limits: self.limits.clone(),
            gamma: self.gamma,
            initial_dist: self.initial_dist.clone(),
        }
    }

    /// Parses and validates a dense interchange document.
    pub fn from_doc(doc: TabularCmdpDoc) -> Result<Self, CmdpError> {
        Self::from_dense(doc.transition, doc.reward, doc.costs, doc.limits, doc.gamma, doc.initial_dist)
    }
}

/// Truncation horizon for discount `gamma` and reward scale `max_abs_reward`.
pub fn horizon_for(gamma: f64, max_abs_reward: f64) -> usize {
    if max_abs_reward <= 1e-3 || gamma == 0.0 {
        return 1;
    }
    let h = ((1e-3 / max_abs_reward).ln() / gamma.ln()).ceil();
    (h.max(1.0)) as usize
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// `sum_t gamma^t values[t]`; an empty list yields 0.
pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&gamma));
    let mut acc = 0.0;
    for &v in values.iter().rev() {
        acc = v + gamma * acc;
    }
    acc
}

/// A state as seen by learners: a tabular index plus a feature vector for
/// function approximators.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRepr {
    pub id: usize,
    pub features: Vec<f64>,
}

/// One sampled step `(s, a, r, c, s')` with an episode-termination flag.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: StateRepr,
    pub action: usize,
    pub reward: f64,
    pub cost_vector: Vec<f64>,
    pub next_state: StateRepr,
    pub terminal: bool,
}

/// An ordered episode (or episode fragment) of transitions together with the
/// identity of the generating policy and the sampling seed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub policy_id: String,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Discounted return of a trajectory.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> f64 {
    let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
    discounted_sum(&rewards, gamma)
}

/// Discounted cost of a trajectory, per channel.
pub fn trajectory_cost(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let m = traj.transitions.first().map_or(0, |t| t.cost_vector.len());
    (0..m)
        .map(|i| {
            let cs: Vec<f64> = traj.transitions.iter().map(|t| t.cost_vector[i]).collect();
            discounted_sum(&cs, gamma)
        })
        .collect()
}

/// The Lagrangian `R - sum_i lambda_i (C_i - d_i)`.
///
/// All three vectors must share the channel count; `lambda` must be
/// componentwise non-negative.
pub fn lagrangian_value(r: f64, c: &[f64], d: &[f64], lambda: &[f64]) -> f64 {
    assert!(
        c.len() == d.len() && d.len() == lambda.len(),
        "channel mismatch: |C|={}, |d|={}, |lambda|={}",
        c.len(),
        d.len(),
        lambda.len()
    );
    debug_assert!(lambda.iter().all(|&l| l >= 0.0));
    r - lambda.iter().zip(c.iter().zip(d.iter())).map(|(&l, (&ci, &di))| l * (ci - di)).sum::<f64>()
}

/// The dual variable: a non-negative multiplier vector plus the history of
/// every completed dual update.
#[derive(Debug, Clone)]
pub struct DualState {
    lambda: Vec<f64>,
    history: Vec<Vec<f64>>,
}

impl DualState {
    /// Starts at `lambda = 0` with empty history.
    pub fn new(m: usize) -> Self {
        Self { lambda: vec![0.0; m], history: Vec::new() }
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    /// Projected ascent `lambda_i <- max(0, lambda_i + beta * gap_i)`.
    pub fn ascend(&mut self, gap: &[f64], beta: f64) {
        assert_eq!(gap.len(), self.lambda.len(), "gap arity");
        for (l, &g) in self.lambda.iter_mut().zip(gap) {
            *l = (*l + beta * g).max(0.0);
        }
        self.history.push(self.lambda.clone());
    }

    /// Replaces the multiplier wholesale (projected to stay non-negative)
    /// and records the replacement as a completed update.
    pub fn overwrite(&mut self, lambda: &[f64]) {
        assert_eq!(lambda.len(), self.lambda.len(), "lambda arity");
        self.lambda = lambda.iter().map(|&l| l.max(0.0)).collect();
        self.history.push(self.lambda.clone());
    }
}
