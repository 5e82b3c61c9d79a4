//! Deterministic seed derivation for replicable randomness.
//!
//! Every random draw in this crate flows through a [`ChaCha8Rng`] whose seed
//! is derived from a root seed plus a string context and an index:
//!
//! ```text
//! seed = splitmix64( splitmix64(root ^ fnv1a64(ctx_0)) ^ ... ^ fnv1a64(ctx_k) ) ^ mix(index)
//! ```
//!
//! where each context label is folded in with one SplitMix64 round and the
//! index with a final round. ChaCha is counter based, so a stream is fully
//! determined by its seed and independent of how many worker threads consume
//! sibling streams. Simulation replicates draw their generators with the
//! replicate index as `index`, which makes per-cell results bit-identical for
//! any worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; cheap and stable across platforms.
#[inline]
fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from a root seed, a path of context labels, and an index.
pub fn derive_seed(root: u64, path: &[&str], index: u64) -> u64 {
    let mut h = splitmix64(root);
    for part in path {
        h = splitmix64(h ^ fnv1a64(part));
    }
    splitmix64(h ^ splitmix64(index.wrapping_add(1)))
}

/// A fresh ChaCha8 generator for the given derivation path.
pub fn derive_rng(root: u64, path: &[&str], index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path, index))
}
