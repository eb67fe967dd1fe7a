//! Counter-based keyed randomness.
//!
//! Every random draw in the toolkit is a pure function of a user seed and a
//! position key, so parallel generation is deterministic and independent of
//! evaluation order or thread count.

use crate::stats::normal_quantile;

/// SplitMix64 finalizer; full-period bijective mixer.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn mix(seed: u64, lane: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(lane)) ^ counter)
}

/// Uniform draw in (0, 1) keyed by (seed, lane, counter).
#[inline]
pub fn keyed_uniform(seed: u64, lane: u64, counter: u64) -> f64 {
    // 53 mantissa bits, offset by half an ulp so 0 is never produced
    ((mix(seed, lane, counter) >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw keyed by (seed, lane, counter), via the inverse CDF.
#[inline]
pub fn keyed_standard_normal(seed: u64, lane: u64, counter: u64) -> f64 {
    normal_quantile(keyed_uniform(seed, lane, counter))
}

/// Deterministic sample of `k` indices out of `0..n` without replacement
/// (partial Fisher-Yates driven by keyed draws).
pub fn keyed_sample_without_replacement(seed: u64, lane: u64, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for step in 0..k {
        let u = keyed_uniform(seed, lane, step as u64);
        let j = step + ((u * (n - step) as f64) as usize).min(n - step - 1);
        pool.swap(step, j);
    }
    pool.truncate(k);
    pool
}
