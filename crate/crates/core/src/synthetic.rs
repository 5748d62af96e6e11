//! Seeded synthetic interaction logs with first-order Markov structure.
//!
//! Each item has two preferred successors (random permutations of the
//! catalog); a user follows the primary successor with probability
//! `p_primary`, the secondary with `p_secondary`, and otherwise jumps to a
//! popularity-skewed random item. The structure gives a learnable next-item
//! signal while the skewed noise injects popularity bias, so both accuracy
//! and coverage effects are observable at desk scale.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{stream, Purpose};
use crate::Result;

#[derive(Debug, Clone)]
pub struct MarkovSpec {
    pub num_items: usize,
    pub num_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_primary: f64,
    pub p_secondary: f64,
    /// Zipf-like exponent for the popularity of noise jumps; 0 = uniform.
    pub popularity_exponent: f64,
    /// Span of user start times; the tail of this window forms the test pool.
    pub horizon: u64,
    /// Seconds between consecutive events of one user.
    pub step: u64,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec {
            num_items: 200,
            num_users: 500,
            min_len: 15,
            max_len: 30,
            p_primary: 0.55,
            p_secondary: 0.2,
            popularity_exponent: 1.1,
            horizon: 50_000,
            step: 300,
            seed: 1,
        }
    }
}

fn shuffled_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Cumulative popularity weights w_r ~ 1/(r+1)^exponent over item ranks.
fn popularity_cdf(n: usize, exponent: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for r in 0..n {
        acc += 1.0 / ((r + 1) as f64).powf(exponent);
        cdf.push(acc);
    }
    let total = *cdf.last().expect("n > 0");
    for v in cdf.iter_mut() {
        *v /= total;
    }
    cdf
}

fn draw_from_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

/// Generates the log as raw TSV rows (`u<id>\ti<id>\t<timestamp>`).
///
/// Per-user timestamps are strictly increasing; user start times are spread
/// uniformly over the horizon so a global quantile split yields a healthy
/// test pool.
pub fn generate_markov_tsv(spec: &MarkovSpec) -> String {
    assert!(spec.num_items >= 2 && spec.num_users >= 1);
    assert!(spec.min_len >= 2 && spec.max_len >= spec.min_len);
    assert!(spec.p_primary + spec.p_secondary <= 1.0);

    let mut rng = stream(spec.seed, Purpose::Synthetic, &[]);
    let primary = shuffled_permutation(spec.num_items, &mut rng);
    let secondary = shuffled_permutation(spec.num_items, &mut rng);
    let cdf = popularity_cdf(spec.num_items, spec.popularity_exponent);

    let mut out = String::new();
    for user in 0..spec.num_users {
        let base: u64 = rng.gen_range(0..spec.horizon);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut current = draw_from_cdf(&cdf, &mut rng);
        for event in 0..len {
            let t = base + spec.step * event as u64;
            out.push_str(&format!("u{user}\ti{current}\t{t}\n"));
            let roll: f64 = rng.gen_range(0.0..1.0);
            current = if roll < spec.p_primary {
                primary[current]
            } else if roll < spec.p_primary + spec.p_secondary {
                secondary[current]
            } else {
                draw_from_cdf(&cdf, &mut rng)
            };
        }
    }
    out
}

pub fn write_markov_tsv(spec: &MarkovSpec, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, generate_markov_tsv(spec).as_bytes())?;
    Ok(())
}
