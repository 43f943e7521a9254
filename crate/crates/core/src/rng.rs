//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the master seed and a purpose tag, so adding draws in one place (say, the
//! probe) never perturbs another (say, minibatch sampling).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The generator used throughout the crate. ChaCha output is specified
/// byte-for-byte, so streams agree across platforms.
pub type SimRng = ChaCha12Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    Minibatch = 4,
    Rounding = 5,
    Probe = 6,
    Strategy = 7,
    Controller = 8,
    Noise = 9,
    Trial = 10,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a list of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// A stream for `purpose`, optionally specialised by extra tags such as a
/// client id and a round number.
pub fn stream(seed: u64, purpose: Stream, tags: &[u64]) -> SimRng {
    let mut all = Vec::with_capacity(tags.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(tags);
    SimRng::seed_from_u64(derive_seed(seed, &all))
}
