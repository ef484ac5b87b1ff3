//! Seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `seed` for a named purpose.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Normal(0, σ²) restricted to `[-bound·σ, bound·σ]` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, sigma: f64, bound: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= bound {
            return z * sigma;
        }
    }
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> alloc::vec::Vec<usize> {
    let mut p: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
