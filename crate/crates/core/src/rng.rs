//! Deterministic RNG streams.
//!
//! Every run draws from one master seed. Independent components (one chain per
//! individual, the simulator, the SAEM loop) get their own counter-based
//! stream keyed by a label and an index, so results do not depend on thread
//! scheduling or on the order in which components are run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based generator for the stream `(seed, label, index)`.
pub fn stream_rng(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let lh = label_hash(label);
    let mut key = [0u8; 32];
    let words = [
        mix(seed),
        mix(seed ^ lh),
        mix(lh.wrapping_add(index)),
        mix(seed.wrapping_add(mix(index))),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
