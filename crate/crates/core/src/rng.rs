//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`LabRng`], a ChaCha8 stream
//! cipher generator. ChaCha output is specified independently of platform and
//! word size, so a seed reproduces the same stream everywhere.
//!
//! Independent streams are obtained with [`derive_seed`]: the purpose tag is
//! hashed with 64-bit FNV-1a, combined with the master seed, and passed through
//! the SplitMix64 finalizer. Two different tags (or indices) give unrelated
//! seeds, which lets data generation, initialization, batching and subset
//! drawing vary independently under a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `tag` under `master`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(tag.as_bytes())))
}

/// Sub-seed for the `index`-th member of a family (epochs, partitions, ...).
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_add(1)))
}
