//! Deterministic seed-derived random streams.
//!
//! Every source of randomness in the artifact is a ChaCha stream keyed by
//! SHA-256 of (master seed, purpose tag, indices). Streams are independent of
//! execution order, so workers can draw in parallel and resumed runs replay
//! the exact sequence an uninterrupted run would have used.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// Stream keyed by `(seed, tag, indices)`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([tag.len() as u8]);
    hasher.update(tag.as_bytes());
    for &i in indices {
        hasher.update(i.to_le_bytes());
    }
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `[0, 1)` with 53-bit resolution.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Uniform integer in `[0, n)`.
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (uniform(rng) * n as f64) as usize % n
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Vector of standard normal draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal(rng) as f32).collect()
}

/// Deterministic in-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a1: Vec<u64> = { let mut r = stream(7, "x", &[1]); (0..4).map(|_| r.next_u64()).collect() };
        let a2: Vec<u64> = { let mut r = stream(7, "x", &[1]); (0..4).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = stream(7, "x", &[2]); (0..4).map(|_| r.next_u64()).collect() };
        let c: Vec<u64> = { let mut r = stream(7, "y", &[1]); (0..4).map(|_| r.next_u64()).collect() };
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = stream(3, "normal", &[]);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = stream(11, "shuffle", &[]);
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut r, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
