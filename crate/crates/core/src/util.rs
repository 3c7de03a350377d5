//! Seeding, deterministic parallelism, and small shared helpers.
//!
//! Every stochastic component in the crate draws from a [`ChaCha8Rng`]
//! derived from a `u64` seed plus a short stream tag, so that independent
//! subsystems (layout sampling, parameter init, batch shuffling, ...) never
//! share a stream and every run is reproducible from one master seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Seedable RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derive an independent RNG from `(seed, tag, index)`.
///
/// The tag keeps streams for different purposes disjoint even when they use
/// the same master seed; the index separates parallel items (episodes, batch
/// elements) so generation order does not depend on thread scheduling.
pub fn rng_for(seed: u64, tag: &str, index: u64) -> Rng {
    // FNV-1a over the tag, mixed with seed and index via splitmix64 steps.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut next = || {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&next().to_le_bytes());
    }
    Rng::from_seed(key)
}

/// Order-preserving parallel map.
///
/// Results are collected in input order, so floating-point reductions done
/// by the caller are independent of thread count and scheduling. This is the
/// only parallel primitive used in the crate; never reduce inside rayon.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Like [`par_map`] over an index range.
pub fn par_map_idx<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Linear-interpolation quantile of unsorted data (the `numpy` default).
///
/// `q` in [0,1]; data of length n is sorted and the quantile read at
/// fractional position `q * (n-1)`.
pub fn quantile(data: &[f64], q: f64) -> f64 {
    assert!(!data.is_empty(), "quantile of empty slice");
    let mut v: Vec<f64> = data.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// Median shorthand.
pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

/// Format a float for CSV output: shortest round-trip representation, so
/// re-runs compare bit-identically as text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
