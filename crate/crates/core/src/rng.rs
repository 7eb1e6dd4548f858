//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the sub-stream `name` of `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
