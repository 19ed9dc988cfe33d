//! Seedable counter-based pseudo-random generator.
//!
//! The generator is SplitMix64: output `i` for seed `s` is
//! `mix(s + (i+1) * 0x9E3779B97F4A7C15)` where `mix` is the 64-bit
//! finalizer `z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27;
//! z *= 0x94D049BB133111EB; z ^= z>>31` (all arithmetic wrapping).
//! The exact algorithm is fixed here so that dropout masks, shuffles and
//! weight initialization are reproducible bit-for-bit for a given seed,
//! independent of platform or standard-library internals.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// 64-bit finalizer with full avalanche.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

use mix64 as mix;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derives an independent stream from a base seed. Streams with
    /// different ids are decorrelated by double mixing.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        SplitMix64::new(mix(seed ^ mix(stream_id.wrapping_mul(GAMMA) ^ 0xA5A5_A5A5_A5A5_A5A5)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n). n must be non-zero; modulo bias is
    /// irrelevant at the corpus sizes used here.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// FNV-1a over bytes with a salt, used for stable held-out splits keyed by
/// verse id. Stays fixed forever; do not replace with `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8], salt: u64) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325 ^ salt;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
