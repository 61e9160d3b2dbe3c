//! Seeded random streams and the sampling helpers used across the crate.
//!
//! Every stochastic choice (weight init, dropout, shuffling, partitioning,
//! synthesis) draws from a `ChaCha8Rng` obtained through [`stream`], keyed by
//! a user seed and a fixed stream id. Separate streams keep the choices
//! independent: e.g. changing the number of dropout draws never perturbs the
//! epoch shuffle order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const STREAM_INIT: u64 = 0x494e4954; // weight initialization
pub const STREAM_DROPOUT: u64 = 0x44524f50; // dropout masks, one stream per run
pub const STREAM_PARTITION: u64 = 0x50415254; // p-percent D1/D2 split
pub const STREAM_SYNTH: u64 = 0x53594e54; // synthetic dataset generation
pub const STREAM_EYEBALL: u64 = 0x45594542; // eyeballing noise
pub const STREAM_EPOCH_BASE: u64 = 0x4550 << 32; // + epoch: per-epoch visit order

/// A ChaCha generator for `(seed, stream_id)`.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Uniform draw from `[0, 1)` with 24 bits of precision.
#[inline]
pub fn uniform_f32(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Uniform draw from `[0, 1)` with 53 bits of precision.
#[inline]
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw from `[lo, hi)`.
#[inline]
pub fn uniform_range_f64(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Unbiased uniform draw from `0..n` (Lemire's multiply-shift with rejection).
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_usize requires n > 0");
    let n = n as u64;
    let mut x = rng.next_u64();
    let mut m = (x as u128) * (n as u128);
    let mut low = m as u64;
    if low < n {
        let threshold = n.wrapping_neg() % n;
        while low < threshold {
            x = rng.next_u64();
            m = (x as u128) * (n as u128);
            low = m as u64;
        }
    }
    (m >> 64) as usize
}

/// Uniform integer draw from the inclusive range `lo..=hi`.
pub fn uniform_u32_inclusive(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> u32 {
    assert!(lo <= hi);
    lo + uniform_usize(rng, (hi - lo + 1) as usize) as u32
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform_f64(rng);
    let u2 = uniform_f64(rng);
    let radius = libm::sqrt(-2.0 * libm::log(u1));
    (radius * libm::cos(2.0 * core::f64::consts::PI * u2)) as f32
}
