//! Seeded random streams.
//!
//! Every random draw comes from a ChaCha12 generator keyed by the run seed.
//! Independent streams are selected with the 64-bit ChaCha stream id,
//! `(purpose << 48) | index`, so a particle's draws depend only on
//! `(seed, purpose, particle index)` and never on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Per-particle initial state and momentum refreshes.
    Particle = 1,
    /// The population-level resampling uniform.
    Resample = 2,
    /// Gauge-potential initialisation.
    GaugeInit = 3,
    /// Samples drawn by oracles and validation checks.
    Oracle = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    debug_assert!(index < (1 << 48));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | index);
    rng
}
