//! Platform-independent deterministic randomness.
//!
//! Every random decision in the engine (distractor sampling, option
//! shuffles, simulated oracle draws, frontier shuffles, weight init) is
//! derived from a [`Xoshiro256PlusPlus`] stream seeded through SplitMix64.
//! Stream keys are built with [`stream_key`], which hashes a base seed with
//! an arbitrary label (usually a canonical node id) using FNV-1a and then
//! finalizes with the SplitMix64 mixer. None of this depends on pointer
//! width or endianness, so sampled values are identical on every platform.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Key for a stream derived from `seed` and a textual label.
pub fn stream_key(seed: u64, label: &str) -> u64 {
    mix64(seed ^ mix64(fnv1a(label.as_bytes())))
}

/// Combine a key with a sequence of integer coordinates.
pub fn sub_key(key: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(key, |k, &c| mix64(k ^ mix64(c)))
}

/// Uniform in [0, 1) from the top 53 bits.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seeded stream generator.
#[derive(Debug, Clone)]
pub struct DetRng(Xoshiro256PlusPlus);

impl DetRng {
    pub fn new(key: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(key))
    }

    pub fn keyed(seed: u64, label: &str) -> Self {
        Self::new(stream_key(seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform integer in `0..n` by rejection sampling on 64-bit words.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
