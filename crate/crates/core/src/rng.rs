//! Counter-based random streams.
//!
//! Every trajectory draws from its own ChaCha8 stream addressed by
//! `(seed, index)`, so results do not depend on how trajectories are
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream number `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
