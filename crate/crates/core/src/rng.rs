//! Seed derivation. Every random stream is a ChaCha8 generator keyed by
//! (run seed, stream label), so streams are independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label).to_le_bytes());
    key[16..24].copy_from_slice(&(label.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    stream(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), label)
}

/// A derived integer seed, for APIs that take a seed rather than a stream.
pub fn stream_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, label, index).next_u64()
}
