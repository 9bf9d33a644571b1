//! Expansion of one user seed into independent per-purpose RNG streams.
//!
//! A stream seed is `splitmix64(seed ^ fnv1a64(label))`, so adding a new
//! stream never perturbs existing ones. Every generator in the crate is a
//! `ChaCha8Rng` seeded this way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Human-readable description of the splitting scheme, echoed into manifests.
pub const SCHEME: &str = "stream_seed = splitmix64(seed XOR fnv1a64(label)); rng = ChaCha8(stream_seed)";

fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label))
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}
