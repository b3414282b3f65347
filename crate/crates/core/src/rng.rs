//! Deterministic random streams.
//!
//! Every random draw in the crate goes through [`seeded`] or [`substream`].
//! Both are backed by ChaCha8, whose output is fixed by the algorithm, so a
//! given `(seed, stream)` pair yields the same values on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed`.
///
/// Streams are selected through ChaCha's stream word, so they never overlap
/// and can be generated in any order.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A derived 64-bit seed for `index`, for APIs that take a plain seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, index).next_u64()
}
