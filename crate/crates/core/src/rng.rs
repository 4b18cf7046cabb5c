//! Seeded, portable random streams.
//!
//! Every stochastic routine takes an explicit RNG. Independent substreams
//! are derived from `(seed, stream)` so work can be split across columns,
//! trials or threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Root generator for `seed`.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Substream keyed by a purpose tag and an index, e.g. `("trial", 7)`.
pub fn tagged(seed: u64, tag: &str, index: u64) -> Rng {
    substream(mix(seed, tag), index)
}

// FNV-1a over the tag, folded into the seed with a splitmix finalizer.
fn mix(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
