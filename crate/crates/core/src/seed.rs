//! Seed derivations. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a 64-bit value produced here, so results never depend on
//! thread scheduling or call order.
//!
//! Ensemble member `i` of a forecast with base seed `s` uses
//! `derive(s, MEMBER, i)`; step `k` of a rollout with seed `r` uses
//! `derive(r, STEP, k)`. Each derivation is a splitmix64 finalizer over a
//! mix of its inputs, injective in `index` for fixed `(seed, domain)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MEMBER: u64 = 0x6d65_6d62_6572_0001;
pub const STEP: u64 = 0x7374_6570_0000_0002;
pub const EPOCH: u64 = 0x6570_6f63_6800_0003;
pub const PARAM: u64 = 0x7061_7261_6d00_0004;
pub const NOISE: u64 = 0x6e6f_6973_6500_0005;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64` is a bijection on `u64`, so for fixed `seed` and `domain`
/// distinct indices always map to distinct outputs.
pub fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a, used to key parameter initialisation by name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
