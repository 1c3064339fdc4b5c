//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, domain, cell, repeat, index)`. The first
//! four words are mixed into a ChaCha key and `index` selects the ChaCha
//! stream, so every sample of every experiment cell owns a non-overlapping
//! sequence regardless of how the work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct domains never share keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    TrainFaults = 4,
    EvalFaults = 5,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, cell: u64, repeat: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let words = [domain as u64, cell, repeat];
    let mut mixed = splitmix64(&mut state);
    for w in words {
        state ^= w.wrapping_mul(0xd6e8_feb8_6659_fd93);
        mixed ^= splitmix64(&mut state);
    }
    for chunk in key.chunks_exact_mut(8) {
        mixed = mixed.rotate_left(23) ^ splitmix64(&mut state);
        chunk.copy_from_slice(&mixed.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
