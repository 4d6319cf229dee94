//! Deterministic RNG helpers.
//!
//! Dropout masks come from a counter-based scheme: every draw is keyed by
//! (global seed, pass index, call counter), so two forward passes over the
//! same input with different pass indices get independent masks, and the
//! same key always reproduces the same mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b)
}

pub fn mix3(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(mix2(a, b) ^ splitmix64(c))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based dropout mask source for one forward pass.
pub struct DropoutRng {
    seed: u64,
    pass: u64,
    counter: u64,
}

impl DropoutRng {
    pub fn new(seed: u64, pass: u64) -> Self {
        DropoutRng { seed, pass, counter: 0 }
    }

    /// Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).
    pub fn mask(&mut self, len: usize, p: f64) -> Vec<f64> {
        let key = mix3(self.seed, self.pass, self.counter);
        self.counter += 1;
        if p <= 0.0 {
            return vec![1.0; len];
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_mask() {
        let mut a = DropoutRng::new(7, 3);
        let mut b = DropoutRng::new(7, 3);
        assert_eq!(a.mask(64, 0.3), b.mask(64, 0.3));
    }

    #[test]
    fn different_pass_different_mask() {
        let mut a = DropoutRng::new(7, 0);
        let mut b = DropoutRng::new(7, 1);
        assert_ne!(a.mask(256, 0.3), b.mask(256, 0.3));
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut a = DropoutRng::new(1, 0);
        assert!(a.mask(16, 0.0).iter().all(|&v| v == 1.0));
    }
}
