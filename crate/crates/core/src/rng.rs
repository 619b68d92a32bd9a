//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed, a
//! fixed label and an integer index, so adding a new consumer never shifts
//! the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    let h = fnv1a(label.as_bytes(), FNV_OFFSET);
    let mixed = splitmix(splitmix(seed ^ h).wrapping_add(index));
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(mixed.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, e.g. for one cell of a parameter sweep.
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(label.as_bytes(), FNV_OFFSET)).wrapping_add(index))
}
