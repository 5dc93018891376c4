//! Seeded RNG streams.
//!
//! Every stochastic role in a run (weight init, shuffling, the two
//! reparameterization noises, prior draws) gets its own ChaCha stream forked
//! from the single run seed, so results do not depend on evaluation order
//! between roles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stochastic roles, each mapped to a distinct stream of the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Init = 1,
    Shuffle = 2,
    EpsAge = 3,
    EpsIrrel = 4,
    Prior = 5,
}

/// Fork a deterministic per-role RNG from a run seed.
pub fn role_rng(seed: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}
