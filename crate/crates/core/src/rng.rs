//! Named random streams derived from a single seed.
//!
//! Every stochastic component draws from its own stream so that adding draws in
//! one place never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const DESIGN: &str = "design";
pub const MCMC: &str = "mcmc";
pub const REFINEMENT: &str = "refinement";
pub const OBSERVATION: &str = "observation";

fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Deterministic generator for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Sub-stream keyed by a name and an index, e.g. one per refinement iteration.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name));
    rng
}
