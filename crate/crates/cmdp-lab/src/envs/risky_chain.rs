//! RiskyChain: the one-state, two-action CMDP whose constrained optimum is
//! known in closed form, used to verify both the oracle and the learners.
//!
//! Action 0 ("safe") pays reward 1 at no cost; action 1 ("risky") pays
//! reward 10 at cost 1. For a Bernoulli policy with `p = P(risky)`,
//! `R(p) = (1 + 9p) / (1 - gamma)` and `C(p) = p / (1 - gamma)`, so the
//! constrained optimum takes the largest feasible `p`:
//! `p* = min(1, d * (1 - gamma))`. When the constraint binds, the dual
//! optimum is the reward/cost exchange rate of the risky action,
//! `lambda* = (10 - 1) / 1 = 9`.

use crate::cmdp::{CmdpError, SparseTransition, TabularCmdp};

pub fn make_risky_chain(gamma: f64, d: f64) -> Result<TabularCmdp, CmdpError> {
    assert!(d >= 0.0, "cost limit must be non-negative");
    let entry = |reward: f64, cost: f64| {
        vec![SparseTransition { next: 0, prob: 1.0, reward, costs: vec![cost] }]
    };
    TabularCmdp::from_sparse(
        1,
        2,
        vec![vec![entry(1.0, 0.0), entry(10.0, 1.0)]],
        vec![d],
        gamma,
        vec![1.0],
    )
}

/// Closed-form `(R(p), C(p))` for the Bernoulli policy `p = P(risky)`.
pub fn risky_chain_values(gamma: f64, p: f64) -> (f64, f64) {
    ((1.0 + 9.0 * p) / (1.0 - gamma), p / (1.0 - gamma))
}
