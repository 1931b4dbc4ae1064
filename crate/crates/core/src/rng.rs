//! Keyed random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream whose seed
//! is derived from `(master seed, purpose, ids...)`. Draws therefore do not
//! depend on generation order or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags that separate otherwise identical key tuples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    TruthBias = 1,
    ClientMean = 2,
    Sample = 3,
    Cohort = 4,
    Batches = 5,
    Validation = 6,
    Probe = 7,
    Estimate = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a 256-bit ChaCha key from the master seed and a key path.
pub fn stream(seed: u64, purpose: Purpose, ids: &[u64]) -> ChaCha8Rng {
    let mut acc = splitmix64(seed ^ 0x6A09_E667_F3BC_C908);
    acc = splitmix64(acc ^ purpose as u64);
    for &id in ids {
        acc = splitmix64(acc ^ splitmix64(id.wrapping_add(0x3C6E_F372_FE94_F82B)));
    }
    let mut key = [0u8; 32];
    let mut word = acc;
    for chunk in key.chunks_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
