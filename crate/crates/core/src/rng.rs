//! Seed plumbing. Every stochastic routine takes an explicit seed and draws
//! from a ChaCha8 stream derived from it, so results are reproducible across
//! platforms and independent of call order elsewhere in the program.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`. Distinct stream ids give
/// independent sequences from the same seed.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer: maps `(seed, index)` to a well-mixed child seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
