//! Named, independently seeded RNG streams.
//!
//! Every stochastic concern (model init, batch shuffling, self-augmentation,
//! inter-augmentation, per-image scenario noise) draws from its own stream,
//! derived from `(master seed, tag, index)`. Streams never interleave, so
//! toggling one mechanism off cannot shift the draws of another, and a run
//! resumed from a step checkpoint replays the exact draws of a full run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable seed derivation: FNV-1a over the tag, mixed with the index and
/// master seed through a splitmix64 finalizer.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fresh stream for `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag, index))
}
