//! Counter-based randomness. Step `k` of path `i` under master seed `m` is
//! a pure function of `(m, i, k)`, so results never depend on how paths are
//! scheduled across workers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-path seed derived from the master seed and the path index.
pub fn path_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// One `u64` per walk step, addressable by step index.
#[derive(Clone, Debug)]
pub struct StepStream {
    rng: ChaCha8Rng,
}

impl StepStream {
    pub fn new(seed: u64) -> StepStream {
        StepStream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Positioned so that the next draw is the one for `step`.
    pub fn at(seed: u64, step: u64) -> StepStream {
        let mut s = StepStream::new(seed);
        s.seek(step);
        s
    }

    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(2 * step as u128);
    }

    /// Index of the step the next draw belongs to.
    pub fn position(&self) -> u64 {
        (self.rng.get_word_pos() / 2) as u64
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }
}

#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
