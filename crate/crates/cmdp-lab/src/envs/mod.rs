//! Experiment environments behind a single sampling interface.
//!
//! Learners interact through [`Environment`]: reset, step, and static
//! metadata (action count, cost channels, limits, discount, feature layout).
//! Episodes end either because the environment reports `done` (true
//! termination, nothing more can be collected) or because the sampler cuts
//! at [`Environment::max_episode_steps`] (truncation; value estimates should
//! bootstrap through a cut but not through a termination).

pub mod grid;
pub mod risky_chain;

use rand_chacha::ChaCha8Rng;

use crate::cmdp::{StateRepr, TabularCmdp};

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: StateRepr,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub done: bool,
}

pub trait Environment {
    fn num_actions(&self) -> usize;
    fn num_cost_channels(&self) -> usize;
    fn limits(&self) -> &[f64];
    fn gamma(&self) -> f64;
    fn feature_dim(&self) -> usize;
    /// Size of the tabular state index space, when the environment is
    /// enumerable (tabular policies and baselines require it).
    fn num_states(&self) -> Option<usize>;
    /// Hard cap on episode length used by samplers to truncate.
    fn max_episode_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> StateRepr;
    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> StepOutcome;
}

/// Simulator view of a [`TabularCmdp`]: states are exposed with one-hot
/// features, episodes never terminate and are truncated at the CMDP's
/// discount horizon.
pub struct TabularEnv {
    cmdp: TabularCmdp,
    current: usize,
}

impl TabularEnv {
    pub fn new(cmdp: TabularCmdp) -> Self {
        Self { cmdp, current: 0 }
    }

    pub fn cmdp(&self) -> &TabularCmdp {
        &self.cmdp
    }

    fn repr(&self, s: usize) -> StateRepr {
        let mut features = vec![0.0; self.cmdp.num_states()];
        features[s] = 1.0;
        StateRepr { id: s, features }
    }
}

impl Environment for TabularEnv {
    fn num_actions(&self) -> usize {
        self.cmdp.num_actions()
    }

    fn num_cost_channels(&self) -> usize {
        self.cmdp.num_cost_channels()
    }

    fn limits(&self) -> &[f64] {
        self.cmdp.limits()
    }

    fn gamma(&self) -> f64 {
        self.cmdp.gamma()
    }

    fn feature_dim(&self) -> usize {
        self.cmdp.num_states()
    }

    fn num_states(&self) -> Option<usize> {
        Some(self.cmdp.num_states())
    }

    fn max_episode_steps(&self) -> usize {
        self.cmdp.horizon()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> StateRepr {
        self.current = self.cmdp.sample_initial(rng);
        self.repr(self.current)
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> StepOutcome {
        let (next, reward, costs) = self.cmdp.sample_next(self.current, action, rng);
        self.current = next;
        StepOutcome { next: self.repr(next), reward, costs, done: false }
    }
}
