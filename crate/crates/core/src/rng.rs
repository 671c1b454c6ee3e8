//! Keyed random streams.
//!
//! Every random decision in a run draws from a stream addressed by
//! `(seed, domain, round, client)`. Streams never share state, so results do
//! not depend on the order (or thread) in which clients are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct domains never collide for the same key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Data = 1,
    Profiles = 2,
    Speeds = 3,
    Selection = 4,
    Training = 5,
    Network = 6,
    ModelInit = 7,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of splitmix64; a bijective 64-bit mixer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Open the stream for `(seed, domain, round, client)`.
pub fn stream(seed: u64, domain: Domain, round: u64, client: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (i, word) in [domain as u64, round, client, 0].into_iter().enumerate() {
        state = splitmix64(state ^ word.wrapping_mul(GOLDEN));
        key[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed from a master seed and a textual label.
///
/// The label is folded byte-wise through splitmix64, so the result depends
/// only on `(master, label)` and is stable across platforms and releases.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = splitmix64(master);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // keep seeds within i64 range so they survive TOML round-trips
    h >> 1
}
