//! Seeded random streams. Every consumer owns its stream; there is no global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs up to three small coordinates into a stream id.
pub fn stream_id(kind: u16, a: u16, b: u16) -> u64 {
    ((kind as u64) << 32) | ((a as u64) << 16) | b as u64
}
