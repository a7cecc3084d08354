//! Counter-based seed derivation.
//!
//! Every random decision in the estimator draws from a stream keyed by a
//! structural address (master seed, tree index, node path) rather than from a
//! shared sequential generator, so trees can be trained in any order and two
//! trainings over order-equivalent inputs consume identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child key from a parent key and a tag.
pub fn derive(key: u64, tag: u64) -> u64 {
    mix(key ^ mix(tag.wrapping_add(GOLDEN)))
}

pub fn stream(key: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(key)
}

// Tags separating the purposes a single key is used for.
pub(crate) const TAG_BOOTSTRAP: u64 = 0xB007;
pub(crate) const TAG_TREE: u64 = 0x7EE;
pub(crate) const TAG_SPLIT: u64 = 0x5B1;
pub(crate) const TAG_LEAF: u64 = 0x1EAF;

pub(crate) fn tree_key(seed: u64, tree: usize) -> u64 {
    derive(derive(seed, TAG_TREE), tree as u64)
}

pub(crate) fn child_key(node: u64, right: bool) -> u64 {
    derive(node, if right { 2 } else { 1 })
}
