//! Seeded randomness. Every random draw in the crate comes from a generator
//! built here; nothing reads global entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `stream` under master `seed`.
pub fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
