//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by `(seed, purpose, index)`, so unrelated consumers never
//! share a stream and reordering one does not perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelInit = 1,
    PrototypeInit = 2,
    Shuffle = 3,
    AdvTrain = 4,
    Attack = 5,
    Subset = 6,
    Synthetic = 7,
    Probe = 8,
    Eval = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
