//! Seeded random streams. Every consumer draws from its own ChaCha stream
//! derived from one user seed, so adding draws in one place never shifts
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_TREE: u64 = 1;
pub const STREAM_SWING: u64 = 2;
pub const STREAM_NOISE: u64 = 3;
pub const STREAM_TERMINAL: u64 = 4;
pub const STREAM_ADMM_INIT: u64 = 5;
/// Monte-Carlo rollout `k` uses `STREAM_MONTE_CARLO + k`.
pub const STREAM_MONTE_CARLO: u64 = 1 << 32;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
