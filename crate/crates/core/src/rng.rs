//! Deterministic RNG streams derived from a single run seed.
//!
//! Every source of randomness in the toolkit is a ChaCha stream derived from
//! `(seed, tags...)`, so any example, batch or speaker can be regenerated in
//! isolation without replaying the runs that preceded it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step, used to mix tag words into derived seeds.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of stream tags into a single u64.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Independent RNG stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
