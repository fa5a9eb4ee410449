//! Deterministic 64-bit generator shared by every seeded stage.
//!
//! The generator is SplitMix64: the state advances by the golden-ratio
//! increment `0x9E37_79B9_7F4A_7C15` and each output is the state passed
//! through the finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! with wrapping multiplication. Derived quantities are fixed as well so that
//! another implementation can reproduce kernels and permutations bit for bit:
//!
//! * `next_f64` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)` draws `next_u64` and rejects values `>= 2^64 - (2^64 mod n)`,
//!   then returns the value `mod n`.
//! * `gaussian` uses one Box-Muller draw per call:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` with `u1`, `u2` from `next_f64`.
//! * `shuffle` is Fisher-Yates from the last index down, `j = below(i + 1)`.
//! * `Rng::stream(seed, tag)` seeds a generator with `mix(seed ^ mix(tag))`,
//!   where `mix` is the finalizer above applied to its argument plus the
//!   increment. Independent consumers of one user seed use distinct tags.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(x: u64) -> u64 {
    finalize(x.wrapping_add(GOLDEN))
}

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for a named sub-stream of `seed`.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Self::new(mix(seed ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        finalize(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Stream tags used across the crate.
pub(crate) mod tags {
    pub const SCATTER: u64 = 1;
    pub const PATTERN_ROWS: u64 = 2;
    pub const PATTERN_COLS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}
