//! Deterministic counter-based random number generation.
//!
//! Everything random in this crate (corpus synthesis, parameter init, batch
//! shuffling, masking spans, mode draws) flows through SplitMix64 with the
//! published constants, so a (seed, tag...) pair reproduces the same stream
//! on any platform and in any language. Gaussians are drawn as an
//! Irwin-Hall sum of twelve uniforms minus six: only +,*,/ are involved, so
//! the samples are bit-identical across platforms (libm-free), at the cost
//! of being an approximation to N(0,1) truncated to (-6, 6).

/// SplitMix64 (Steele, Lea & Flood 2014). `state` advances by the golden
/// gamma; each output is a finalized mix of the state, which makes the
/// generator counter-based: output i is a pure function of (seed, i).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream from a seed and a list of tags.
    /// Used to give every (purpose, step, sample, ...) its own stream so
    /// results do not depend on evaluation order or thread count.
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        let mut s = mix(seed ^ GOLDEN_GAMMA);
        for &t in tags {
            s = mix(s.wrapping_add(GOLDEN_GAMMA) ^ mix(t));
        }
        SplitMix64::new(s)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in [0, n) by rejection on the top bits.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Inclusive integer range.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo + 1)
    }

    /// Approximate standard normal: Irwin-Hall sum of 12 uniforms minus 6.
    pub fn gaussian(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Bernoulli draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
