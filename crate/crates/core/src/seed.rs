//! Seed derivation for reproducible, independent RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream derived from
//! the run seed plus structural tags (iteration, list, sample index), so
//! reruns and resumed runs consume identical randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with structural tags into a new seed.
pub fn mix(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// An independent stream for `(seed, index)`; streams with different
/// indices never overlap.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
