//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose seed is
//! derived from one master seed through SplitMix64 mixing of
//! `(master, stream, counter)`. Streams are fixed labels, so changing one
//! component (say the secondary-mask ratio) never perturbs another (the
//! uniform-sampling draw).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One SplitMix64 output step applied to `x`.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sampling = 1,
    SecondaryMask = 2,
    Init = 3,
    Shuffle = 4,
    Crop = 5,
    PlanSeed = 6,
    Corpus = 7,
    Trial = 8,
    Eval = 9,
}

pub fn derive_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(stream as u64));
    splitmix64(a ^ splitmix64(counter.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream_rng(master: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, counter))
}
