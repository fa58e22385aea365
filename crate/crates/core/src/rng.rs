//! Counter-based random number generation.
//!
//! Every random draw in the crate goes through [`CounterRng`], a SplitMix64
//! finalizer applied to a Weyl sequence `key + counter * GOLDEN`. The output
//! stream is a pure function of `(key, counter)`, so datasets and parameter
//! initializations regenerate identically on every platform and in any
//! language that reimplements the three functions below.
//!
//! Derived streams are keyed with [`derive_key`], e.g. one stream per case is
//! `derive_key(dataset_seed, case_index)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a parent key with a sub-index into an independent stream key.
#[inline]
pub fn derive_key(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(GOLDEN)))
}

/// FNV-1a over bytes, used to turn names into stream indices.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn derive(parent: u64, index: u64) -> Self {
        Self::new(derive_key(parent, index))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Uses the multiply-high reduction, which
    /// has a bias below 2^-40 for the ranges used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (one draw per call, second value discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index drawn proportionally to `weights`.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
