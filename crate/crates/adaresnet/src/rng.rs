//! Seeded pseudo-random numbers.
//!
//! All randomness in this crate (weight init, shuffling, subsampling,
//! synthetic data) flows through [`SplitMix64`], Steele et al.'s 64-bit
//! mixing generator. It is tiny, portable, and has no data-dependent
//! control flow, so every sequence is a pure function of its seed on any
//! platform. Derived streams use [`SplitMix64::derive`] with a domain tag
//! so that, e.g., shuffle order never depends on how many weights the
//! model happened to initialize.

/// SplitMix64 generator. One `u64` of state; each `next_u64` advances the
/// state by a fixed odd constant and mixes it.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// A child generator whose stream is independent of the parent's
    /// position. `tag` separates domains ("init", "shuffle", ...).
    pub fn derive(seed: u64, tag: &str) -> Self {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a offset basis
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        Self::new(seed ^ h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of mantissa, exact in `f32`.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
