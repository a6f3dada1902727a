//! Seeded random number generation.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`). A 64-bit
//! seed is expanded into the 256-bit key with `SeedableRng::seed_from_u64`,
//! and independent sequences are selected with the ChaCha stream number, so a
//! generator for "step 1234 of run with seed 7" is reconstructible without
//! replaying earlier draws.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub use rand_chacha::ChaCha8Rng as Generator;

/// Stream offsets that keep unrelated consumers of one seed apart.
pub mod streams {
    pub const INIT: u64 = 1 << 40;
    pub const TRAIN: u64 = 2 << 40;
    pub const SHUFFLE: u64 = 3 << 40;
    pub const PROBE: u64 = 4 << 40;
    pub const SYNTH: u64 = 5 << 40;
}

pub fn generator(seed: u64) -> Generator {
    Generator::seed_from_u64(seed)
}

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Generator {
    let mut g = Generator::seed_from_u64(seed);
    g.set_stream(stream);
    g
}

/// Uniform draw from `[lo, hi]`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Normal draw with standard deviation `std`, rejected and redrawn outside
/// `±bound · std`.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, bound: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= bound {
            return z * std;
        }
    }
}
