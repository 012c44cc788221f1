//! Named random substreams derived from one 64-bit seed.
//!
//! Every consumer of randomness (split, init, shuffle, cutmix, dropout)
//! draws from its own ChaCha stream keyed by `(seed, name, index)`, so
//! reordering or parallelising one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a, used to fold names and paths into stream keys.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let a = splitmix64(seed ^ fnv1a(name.as_bytes()));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn substream(seed: u64, name: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
