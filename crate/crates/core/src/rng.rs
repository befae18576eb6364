//! SplitMix64 pseudo-random stream.
//!
//! Every random draw in the crate goes through this generator so that
//! trajectories can be reproduced bit-for-bit by other implementations:
//!
//! ```text
//! state  <- state + 0x9E3779B97F4A7C15
//! z      <- state
//! z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output <- z ^ (z >> 31)
//! ```
//!
//! `below(n)` maps an output `x` to `(x * n) >> 64` (128-bit product) and
//! `next_f64()` returns `(x >> 11) * 2^-53`. Substreams are seeded with
//! `mix(seed ^ mix(tag))`, where `mix` is the output function above applied to
//! its argument plus the golden-ratio increment.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for the substream named by `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// A fresh generator for substream `tag`, leaving `self` untouched.
    pub fn substream(seed: u64, tag: u64) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform real in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform real in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Named substreams of a run's master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Environment = 1,
    Augmentation = 2,
    Initialization = 3,
    Replay = 4,
    Acting = 5,
    Evaluation = 6,
    Bootstrap = 7,
}

impl Stream {
    pub fn rng(self, master_seed: u64) -> SplitMix64 {
        SplitMix64::substream(master_seed, self as u64)
    }

    /// Seed of this substream, for callers that derive further seeds from it.
    pub fn seed(self, master_seed: u64) -> u64 {
        derive_seed(master_seed, self as u64)
    }
}
