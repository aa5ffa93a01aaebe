//! Seeding.
//!
//! Every random draw in the crate comes from [`Rng64`] (ChaCha with 8
//! rounds), seeded from a 64-bit value. Child seeds are derived with
//! [`mix`], a SplitMix64-style finalizer folded over the inputs, so a
//! sample's stream depends only on its `(master_seed, stream, index)` and not
//! on which worker produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into one 64-bit seed.
///
/// `h = finalize(h + GOLDEN + p)` for each part, starting from `h = 0`.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0u64, |h, &p| splitmix_finalize(h.wrapping_add(GOLDEN).wrapping_add(p)))
}

/// Stable 64-bit id for a text label, used as a seed stream selector.
pub fn stream_id(label: &str) -> u64 {
    // FNV-1a
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn rng_from(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Generator for child `index` of `stream` under `master`.
pub fn child_rng(master: u64, stream: &str, index: u64) -> Rng64 {
    rng_from(mix(&[master, stream_id(stream), index]))
}
