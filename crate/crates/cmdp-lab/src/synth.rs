//! Random small CMDP instances with guaranteed-feasible, usually binding
//! cost limits, for cross-oracle agreement and learner smoke tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cmdp::TabularCmdp;
use crate::oracle::solve_lagrangian_mdp;

/// A dense random CMDP with `num_states` states and `num_actions` actions:
/// full-support transition rows, rewards in `[-1, 1]`, one cost channel in
/// `[0, 1]`. The limit is placed strictly between the cheapest achievable
/// cost and the cost of the unconstrained optimum, so the instance is
/// feasible and the constraint typically binds.
pub fn random_cmdp_sized(rng: &mut ChaCha8Rng, num_states: usize, num_actions: usize) -> TabularCmdp {
    let gamma = rng.gen_range(0.85..0.95);
    let mut transition = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
    let mut reward = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
    let mut cost = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
    for s in 0..num_states {
        for a in 0..num_actions {
            let raw: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for next in 0..num_states {
                transition[s][a][next] = raw[next] / sum;
                reward[s][a][next] = rng.gen_range(-1.0..1.0);
                cost[s][a][next] = rng.gen_range(0.0..1.0);
            }
        }
    }
    let initial_dist = vec![1.0 / num_states as f64; num_states];

    // Cheapest achievable cost: maximize the negated cost as a plain MDP.
    let negated: Vec<Vec<Vec<f64>>> = cost
        .iter()
        .map(|per_a| per_a.iter().map(|row| row.iter().map(|c| -c).collect()).collect())
        .collect();
    let aux = TabularCmdp::from_dense(
        transition.clone(),
        negated,
        vec![],
        vec![],
        gamma,
        initial_dist.clone(),
    )
    .unwrap();
    let c_min = -solve_lagrangian_mdp(&aux, &[]).r;

    let build = |limit: f64| {
        TabularCmdp::from_dense(
            transition.clone(),
            reward.clone(),
            vec![cost.clone()],
            vec![limit],
            gamma,
            initial_dist.clone(),
        )
        .unwrap()
    };
    let c_unconstrained = solve_lagrangian_mdp(&build(0.0), &[0.0]).costs[0];
    let span = c_unconstrained - c_min;
    let limit = if span > 1e-6 {
        c_min + rng.gen_range(0.15..0.85) * span
    } else {
        c_min + 0.1 * c_min.abs().max(1.0)
    };
    build(limit)
}

/// A random instance at oracle-friendly scale: 2-4 states, 2-3 actions.
pub fn random_cmdp(rng: &mut ChaCha8Rng) -> TabularCmdp {
    let num_states = rng.gen_range(2..=4);
    let num_actions = rng.gen_range(2..=3);
    random_cmdp_sized(rng, num_states, num_actions)
}
