//! Portable pseudo-random numbers for path sampling.
//!
//! Paths must reproduce bit-for-bit across platforms and implementations, so
//! the generator is spelled out here rather than taken from a crate whose
//! stream may change between releases:
//!
//! * seeding and per-path seed derivation use SplitMix64
//!   (increment `0x9E3779B97F4A7C15`, multipliers `0xBF58476D1CE4E5B9` and
//!   `0x94D049BB133111EB`, shifts 30/27/31);
//! * the stream is xorshift64* (shifts 12/25/27, multiplier
//!   `0x2545F4914F6CDD1D`);
//! * uniforms take the top 53 bits: `u = (x >> 11) * 2^-53` in `[0, 1)`;
//! * exponentials use the inverse CDF `-ln(1 - u) / rate`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output for state `z`.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `i`-th independent stream derived from `seed`.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    splitmix64(seed ^ splitmix64(i.wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let s = splitmix64(seed);
        // xorshift state must be nonzero
        Self { state: if s == 0 { GOLDEN } else { s } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        -(1.0 - self.next_f64()).ln() / rate
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n.saturating_sub(1))
    }
}
