//! A constrained-reinforcement-learning optimization laboratory.
//!
//! The crate solves constrained Markov decision processes (CMDPs) two ways and
//! checks one against the other:
//!
//! * **Learners** — a primal-dual policy-gradient loop ([`driver::run_pdo`])
//!   and its accelerated variant ([`driver::run_apdo`]) that overwrites the
//!   dual variable once with an estimate trained off-policy from a replay
//!   buffer ([`offpolicy::train_lambda_off`]).
//! * **Oracles** — exact solvers for small tabular instances
//!   ([`oracle::solve_dual_bisection`], [`oracle::brute_force_enumerate`])
//!   that provide ground-truth `(lambda*, R*, C*)` for the test suite.
//!
//! [`harness`] ties the pieces into a seeded, CSV-emitting experiment runner
//! exposed through the `cmdp-lab` binary.

pub mod cmdp;
pub mod config;
pub mod driver;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod offpolicy;
pub mod onpolicy;
pub mod oracle;
pub mod seeding;
pub mod synth;
