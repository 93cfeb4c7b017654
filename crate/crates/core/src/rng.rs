//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed with a
//! counter-based mixer keyed by `(stream, a, b)`, so the stream of client 3 in
//! round 7 does not depend on which other clients participated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    TestData = 3,
    ModelInit = 4,
    Discriminator = 5,
    ClientRound = 6,
    Selection = 7,
    Finetune = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(stream, a, b)` under `master`.
pub fn child_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, stream: Stream, a: u64, b: u64) -> SimRng {
    rng_from_seed(child_seed(master, stream, a, b))
}
