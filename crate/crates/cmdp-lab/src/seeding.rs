//! Per-component random streams derived from one master seed.
//!
//! Every run derives independent ChaCha streams for the environment, policy
//! initialization, action sampling, buffer sampling, off-policy training and
//! value-function initialization. Changing how one component consumes
//! randomness therefore never perturbs the draws seen by the others, which
//! keeps paired algorithm variants (same master seed) comparable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The independent random-stream consumers within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    /// Environment randomness: resets and stochastic transitions.
    Env,
    /// Policy parameter initialization.
    PolicyInit,
    /// Action sampling during on-policy rollouts.
    Sampling,
    /// Minibatch index draws from the replay buffer.
    Buffer,
    /// Off-policy training: network initialization and exploration noise.
    OffPolicy,
    /// Value-baseline initialization.
    ValueInit,
}

impl StreamId {
    fn tag(self) -> u64 {
        match self {
            StreamId::Env => 1,
            StreamId::PolicyInit => 2,
            StreamId::Sampling => 3,
            StreamId::Buffer => 4,
            StreamId::OffPolicy => 5,
            StreamId::ValueInit => 6,
        }
    }
}

/// Returns the dedicated random stream for `id` under `master_seed`.
pub fn stream(master_seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id.tag());
    rng
}
