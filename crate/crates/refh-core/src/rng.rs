//! Counter-based random-stream derivation.
//!
//! Every random decision in this crate is drawn from a stream derived from a
//! root seed plus a list of integer tags (epoch, minibatch index, trajectory
//! index, ...). Derivation is pure, so runs can be resumed mid-way, work can
//! be sharded in any order, and reruns with the same seed are byte-identical.
//! Streams are ChaCha8 generators: explicit, fast, and stable across
//! dependency upgrades (unlike `StdRng`, whose algorithm is unspecified).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 output permutation. Used as the mixing
/// primitive for combining seeds and tags.
#[inline]
pub fn mix(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `value` into `state` (order-sensitive, avalanche via [`mix`]).
#[inline]
pub fn fold(state: u64, value: u64) -> u64 {
    mix(state ^ value.rotate_left(17))
}

/// Derive a 64-bit stream key from a root seed and a tag path.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed);
    for &t in tags {
        state = fold(state, t);
    }
    state
}

/// Derive a seeded generator from a root seed and a tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, tags))
}

/// Derive a generator directly from a 64-bit key (see [`derive_key`]).
pub fn stream_from_key(key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key)
}

/// Order-sensitive content hash of a slice of floats (by IEEE bit pattern).
///
/// Used to attach an independent chain stream to each frame of a
/// contrastive-divergence batch based on *what the frame contains* rather
/// than where it sits, which makes batch statistics exactly invariant under
/// permutation of the batch.
pub fn content_hash(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut state = 0xA076_1D64_78BD_642Fu64; // arbitrary nonzero start
    for v in values {
        state = fold(state, v.to_bits());
    }
    state
}
