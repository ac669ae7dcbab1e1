//! QKSA: a population of resource-bounded agents that learn an unknown
//! quantum process.
//!
//! Each agent holds one or more tomographic reconstruction strategies,
//! scores candidate measurements one step ahead, weights each strategy by
//! an evolvable resource-cost function, and replicates or halts based on
//! how well its predictions track what it perceives.

pub mod agent;
pub mod environment;
pub mod evolve;
pub mod hypervisor;
pub mod least;
pub mod metrics;
pub mod qcore;
pub mod tomography;

use rand::SeedableRng;

/// Stream tags for [`derive_seed`], so every consumer of a master seed
/// draws from a distinct substream.
pub mod streams {
    /// The agent's own policy randomness (weighted strategy choice).
    pub const POLICY: u64 = 1;
    /// The agent's private environment sampling stream.
    pub const ENVIRONMENT: u64 = 2;
    /// Child master seeds: `CHILD_BASE + children_spawned`.
    pub const CHILD_BASE: u64 = 1 << 32;
    /// Mutation randomness at replication: `MUTATION_BASE + children_spawned`.
    pub const MUTATION_BASE: u64 = (1 << 32) + (1 << 16);
}

/// Deterministic RNG used everywhere seeded behavior matters.  Pinned to a
/// concrete ChaCha stream so seeds stay reproducible across releases.
pub type SeededRng = rand_chacha::ChaCha12Rng;

/// Build the pinned RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Mix a base seed with a stream tag (splitmix64 finalizer), so one master
/// seed can fan out into independent substreams.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
