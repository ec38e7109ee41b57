//! Counter-style keyed random streams.
//!
//! Every random draw in a simulation comes from a fresh ChaCha stream whose
//! seed is derived from the master seed and a small tuple key such as
//! `(domain, agent, episode, step)`. Draw order across agents therefore never
//! affects results, and sequential and parallel execution replay identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags, the first element of every key.
pub mod domain {
    pub const GENERATE: u64 = 1;
    pub const TRANSITION: u64 = 2;
    pub const INITIAL_STATE: u64 = 3;
    pub const SCALARIZATION: u64 = 4;
    pub const PERTURB: u64 = 5;
    pub const CONTEXT: u64 = 6;
    pub const BAYES: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit stream id from a master seed and a key path.
pub fn derive(master: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(master), |acc, k| splitmix64(acc ^ splitmix64(*k)))
}

/// A ChaCha8 generator keyed by `(master, key)`.
pub fn keyed(master: u64, key: &[u64]) -> ChaCha8Rng {
    let mut state = derive(master, key);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
