//! Seeded randomness.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`)
//! seeded from a 64-bit seed. Sub-streams are derived by mixing a stream id
//! into the seed with SplitMix64, so independent consumers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `stream` of the master seed `seed`.
pub fn derived(seed: u64, stream: u64) -> Rng {
    seeded(splitmix64(seed ^ splitmix64(stream)))
}
