//! Deterministic sampling helpers. Every randomized check in the crate draws
//! from a seeded generator so that reports are reproducible run to run.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide default sampling seed, echoed in reports.
pub const DEFAULT_SEED: u64 = 0x51ad_0a7a;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Latin hypercube sample of `count` points over the given axis ranges: each
/// axis is stratified into `count` bins and the bins are visited in a random
/// permutation per axis, which spreads a small budget much better than plain
/// uniform draws.
pub fn latin_hypercube(
    rng: &mut ChaCha8Rng,
    ranges: &[(f64, f64)],
    count: usize,
) -> Vec<Vec<f64>> {
    if ranges.is_empty() {
        return vec![Vec::new(); count];
    }
    let dims = ranges.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dims);
    for &(lo, hi) in ranges {
        let mut perm: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let col: Vec<f64> = perm
            .into_iter()
            .map(|bin| {
                let u: f64 = rng.gen();
                lo + (hi - lo) * ((bin as f64 + u) / count as f64)
            })
            .collect();
        columns.push(col);
    }
    (0..count)
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect()
}

/// Uniform draws over the ranges, one point per call row.
pub fn uniform_box(rng: &mut ChaCha8Rng, ranges: &[(f64, f64)], count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            ranges
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect()
        })
        .collect()
}

/// Chebyshev-distributed points on [a, b], endpoints included, ascending.
/// Clusters near the ends, which is where rank and residual checks tend to
/// lose accuracy on an interval.
pub fn chebyshev_points(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two points");
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (0..n)
        .map(|k| {
            let angle = std::f64::consts::PI * (n - 1 - k) as f64 / (n - 1) as f64;
            mid + half * angle.cos()
        })
        .collect()
}

/// Evenly spaced points on [a, b], endpoints included.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two points");
    (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect()
}
