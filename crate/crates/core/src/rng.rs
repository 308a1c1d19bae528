//! Deterministic random-number streams.
//!
//! Every stochastic component takes a seed plus a tag path, so independent
//! stages (data generation, epochs, Monte-Carlo rounds) draw from
//! non-overlapping streams and whole runs replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 step, used to fold tags into a derived seed.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible generator for `(seed, tags...)`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &tag in tags {
        state = splitmix64(state ^ tag);
    }
    ChaCha12Rng::seed_from_u64(state)
}
