//! Seeded deterministic random streams.
//!
//! Every stochastic operation takes a `&mut LabRng` from its caller. Independent
//! streams are derived from a parent seed and a label or index so that stages,
//! rounds and prompts can be replayed in isolation.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type LabRng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> LabRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5EED)))
}

/// Seed of the child stream named `label` (FNV-1a of the label mixed with the parent).
pub fn derive_named_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(seed, h)
}
