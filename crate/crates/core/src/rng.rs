//! Seeded random-number helpers shared across the crate.
//!
//! Every stochastic operation in this crate takes an explicit `u64` seed and
//! draws from a ChaCha stream, so simulations are reproducible bit-for-bit.

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a given seed.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a (sender, receiver) link from a master
/// seed. `seed_from_u64` mixes the combined value, so structured inputs do
/// not produce correlated streams.
pub fn link_rng(master_seed: u64, sender: usize, receiver: usize) -> ChaCha8Rng {
    let tag = ((sender as u64) << 32) ^ (receiver as u64) ^ 0x6e65_7463_6f6e_73; // "netcons"
    ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // gen::<f64>() is uniform on [0, 1); shift away from 0 for the log.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
}

/// Draw an index from a probability vector (assumed to sum to 1).
pub fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments() {
        let mut rng = chacha(7);
        let n = 20_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn categorical_endpoints() {
        let mut rng = chacha(1);
        for _ in 0..100 {
            let i = categorical(&mut rng, &[0.0, 0.0, 1.0]);
            assert_eq!(i, 2);
        }
        for _ in 0..100 {
            let i = categorical(&mut rng, &[1.0, 0.0, 0.0]);
            assert_eq!(i, 0);
        }
    }

    #[test]
    fn link_streams_differ() {
        let mut a = link_rng(42, 0, 1);
        let mut b = link_rng(42, 1, 0);
        let xa: f64 = a.gen();
        let xb: f64 = b.gen();
        assert_ne!(xa, xb);
    }
}
