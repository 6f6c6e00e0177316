//! The workbench's pseudo-random generator.
//!
//! Synthetic data, weight initialization, splits and batch order all draw
//! from `XorShift64Star` so that a seed fully determines a run, independent
//! of any external crate's stream layout.
//!
//! Algorithm (Marsaglia xorshift with Vigna's multiplicative scrambler):
//!
//! ```text
//! x ^= x >> 12
//! x ^= x << 25
//! x ^= x >> 27
//! return x * 0x2545F4914F6CDD1D   (wrapping)
//! ```
//!
//! The state is seeded as `seed ^ 0x9E3779B97F4A7C15`, replaced by that same
//! constant if the result is zero. Uniform floats take the top 53 bits:
//! `(next_u64() >> 11) * 2^-53`. Bounded integers use `next_u64() % n`.

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const MULTIPLIER: u64 = 0x2545_F491_4F6C_DD1D;

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mixed = seed ^ SEED_MIX;
        XorShift64Star {
            state: if mixed == 0 { SEED_MIX } else { mixed },
        }
    }

    /// Generator for a sub-stream identified by `(seed, stream)`, used e.g. for
    /// per-epoch batch shuffles.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_add(1).wrapping_mul(MULTIPLIER))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(MULTIPLIER)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher–Yates shuffle, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A shuffled `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = XorShift64Star::new(7);
        let mut b = XorShift64Star::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn floats_in_unit_interval() {
        let mut r = XorShift64Star::new(1);
        for _ in 0..10_000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn zero_mixed_seed_is_replaced() {
        let mut r = XorShift64Star::new(SEED_MIX);
        assert_ne!(r.next_u64(), 0);
    }
}
