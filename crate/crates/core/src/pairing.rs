//! Supervised view pairing: for each anchor example, draw another training
//! sequence that shares the same next-item label. The paired prefixes become
//! the two views fed to the redundancy-reduction loss; no stochastic sequence
//! perturbation is ever applied.

use rand::Rng;

use crate::corpus::TrainingExample;
use crate::{Error, ItemId, Result};

/// Inverted index from target item to the training examples labeled with it.
#[derive(Debug, Clone)]
pub struct TargetIndex {
    buckets: Vec<Vec<usize>>,
    targets: Vec<ItemId>,
}

/// Builds the complete index; every example lands in exactly the bucket of
/// its own target.
pub fn build_index(examples: &[TrainingExample]) -> TargetIndex {
    assert!(!examples.is_empty(), "cannot index zero examples");
    let max_item = examples.iter().map(|e| e.target).max().unwrap_or(0);
    let mut buckets = vec![Vec::new(); max_item as usize + 1];
    let mut targets = Vec::with_capacity(examples.len());
    for (idx, ex) in examples.iter().enumerate() {
        buckets[ex.target as usize].push(idx);
        targets.push(ex.target);
    }
    TargetIndex { buckets, targets }
}

impl TargetIndex {
    pub fn bucket(&self, item: ItemId) -> &[usize] {
        self.buckets
            .get(item as usize)
            .map(|b| b.as_slice())
            .unwrap_or(&[])
    }

    pub fn num_examples(&self) -> usize {
        self.targets.len()
    }

    /// Uniform draw from the anchor's target bucket, excluding the anchor.
    /// A singleton bucket returns the anchor itself, so the invariance term
    /// sees identical views and only the decorrelation pressure remains.
    pub fn sample_pair(&self, anchor: usize, rng: &mut impl Rng) -> Result<usize> {
        let target = *self.targets.get(anchor).ok_or_else(|| {
            Error::Consistency(format!("anchor index {anchor} outside the index"))
        })?;
        let bucket = self.bucket(target);
        if bucket.is_empty() {
            return Err(Error::Consistency(format!(
                "target {target} missing from the index"
            )));
        }
        if bucket.len() == 1 {
            return Ok(anchor);
        }
        // Bucket entries are in ascending example order; skip the anchor's slot.
        let anchor_pos = bucket
            .binary_search(&anchor)
            .map_err(|_| Error::Consistency(format!("anchor {anchor} not in its own bucket")))?;
        let mut draw = rng.gen_range(0..bucket.len() - 1);
        if draw >= anchor_pos {
            draw += 1;
        }
        Ok(bucket[draw])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn example(target: ItemId) -> TrainingExample {
        TrainingExample {
            prefix: vec![0, 0, target.max(1)],
            target,
        }
    }

    #[test]
    fn index_buckets_by_target() {
        let examples = vec![example(3), example(3), example(5)];
        let index = build_index(&examples);
        assert_eq!(index.bucket(3), &[0, 1]);
        assert_eq!(index.bucket(5), &[2]);
        assert_eq!(index.bucket(4), &[] as &[usize]);
    }

    #[test]
    fn all_distinct_targets_give_singletons() {
        let examples: Vec<TrainingExample> = (1..=6).map(example).collect();
        let index = build_index(&examples);
        for (idx, ex) in examples.iter().enumerate() {
            assert_eq!(index.bucket(ex.target), &[idx]);
        }
    }

    #[test]
    fn bucket_sizes_sum_to_example_count() {
        let mut examples = Vec::new();
        for k in 0u64..10_000 {
            let t = (crate::rng::splitmix64(k) % 50 + 1) as ItemId;
            examples.push(example(t));
        }
        let index = build_index(&examples);
        let total: usize = (0..=50).map(|i| index.bucket(i).len()).sum();
        assert_eq!(total, 10_000);
    }

    #[test]
    fn pair_in_two_bucket_is_forced() {
        let examples = vec![example(3), example(3)];
        let index = build_index(&examples);
        let mut rng = stream(1, Purpose::Pairing, &[]);
        for _ in 0..20 {
            assert_eq!(index.sample_pair(0, &mut rng).unwrap(), 1);
            assert_eq!(index.sample_pair(1, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn singleton_bucket_self_pairs() {
        let examples = vec![example(3), example(4)];
        let index = build_index(&examples);
        let mut rng = stream(1, Purpose::Pairing, &[]);
        assert_eq!(index.sample_pair(0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn pairs_share_targets_and_replay_under_seed() {
        let mut examples = Vec::new();
        for k in 0u64..500 {
            let t = (crate::rng::splitmix64(k * 7 + 1) % 20 + 1) as ItemId;
            examples.push(example(t));
        }
        let index = build_index(&examples);
        let draw_all = || {
            let mut rng = stream(8, Purpose::Pairing, &[2]);
            (0..examples.len())
                .map(|a| index.sample_pair(a, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let pairs = draw_all();
        assert_eq!(pairs, draw_all());
        for (anchor, &pair) in pairs.iter().enumerate() {
            assert_eq!(examples[anchor].target, examples[pair].target);
        }
    }

    /// Chi-squared uniformity check on a bucket of 100: the statistic over
    /// 99 cells should sit within 3 sigma of its expectation.
    #[test]
    fn pair_draws_are_uniform_by_chi_squared() {
        let examples: Vec<TrainingExample> = (0..100).map(|_| example(7)).collect();
        let index = build_index(&examples);
        let mut rng = stream(4, Purpose::Pairing, &[]);
        let draws = 10_000usize;
        let mut counts = vec![0usize; 100];
        for _ in 0..draws {
            counts[index.sample_pair(0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0, "anchor must never pair with itself here");
        let expected = draws as f64 / 99.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi^2 with 98 dof: mean 98, variance 196.
        let dof = 98.0_f64;
        assert!(
            (chi2 - dof).abs() <= 3.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2} outside 3 sigma of {dof}"
        );
    }
}
