//! Named sub-seeds. Every random stream in the crate is derived from one
//! root seed plus a label, so adding a new consumer never shifts the
//! values seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a label.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ fnv1a(label.as_bytes()))
}

/// Derives a child seed from `seed`, a label and an index.
pub fn indexed_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(sub_seed(seed, label) ^ splitmix(index))
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, label))
}

pub fn rng_indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(indexed_seed(seed, label, index))
}
