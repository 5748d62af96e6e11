//! Seed derivation and counter-based randomness.
//!
//! Every source of randomness in the crate is derived from a single run seed
//! through [`stream`], which mixes a purpose tag and arbitrary context words
//! into an independent ChaCha stream. Dropout uses the stateless [`unit_at`]
//! hash instead of a sequential generator so masks depend only on their
//! coordinates, not on evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep derived streams disjoint even for equal context words.
#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    Init,
    Shuffle,
    Negatives,
    Candidates,
    Pairing,
    Dropout,
    Synthetic,
    Eval,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x01,
            Purpose::Shuffle => 0x02,
            Purpose::Negatives => 0x03,
            Purpose::Candidates => 0x04,
            Purpose::Pairing => 0x05,
            Purpose::Dropout => 0x06,
            Purpose::Synthetic => 0x07,
            Purpose::Eval => 0x08,
        }
    }
}

/// SplitMix64 finalizer; full-period bijective mixer.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Folds a sequence of words into one well-mixed key.
#[inline]
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x2545f4914f6cdd1d_u64;
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// Independent deterministic generator for (seed, purpose, context...).
pub fn stream(seed: u64, purpose: Purpose, context: &[u64]) -> ChaCha8Rng {
    let mut words = Vec::with_capacity(context.len() + 2);
    words.push(seed);
    words.push(purpose.tag());
    words.extend_from_slice(context);
    ChaCha8Rng::seed_from_u64(mix(&words))
}

/// Maps a u64 onto [0, 1) with 53 bits of precision.
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stateless uniform draw in [0, 1) addressed purely by coordinates.
#[inline]
pub fn unit_at(seed: u64, coords: &[u64]) -> f64 {
    let mut h = splitmix64(seed ^ Purpose::Dropout.tag().wrapping_mul(0x9e3779b97f4a7c15));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    unit_f64(h)
}

/// Standard normal draw via Box-Muller on the raw ChaCha stream.
///
/// Self-contained so that seeded initializations stay stable regardless of
/// distribution-crate internals.
pub fn next_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand_chacha::rand_core::RngCore;
    // u1 in (0, 1] so ln(u1) is finite.
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = unit_f64(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
