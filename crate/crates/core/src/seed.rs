//! Counter-based derivation of independent random streams from one master seed.
//!
//! Every consumer of randomness names a [`Stream`] and up to two counters
//! (for example round and client). The sub-seed is a SplitMix64 chain over
//! `(master, stream tag, a, b)`, so adding a new consumer never shifts the
//! draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    ModelInit = 3,
    Channel = 4,
    Scheduling = 5,
    Shuffle = 6,
    Valuation = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, a, b))
}
