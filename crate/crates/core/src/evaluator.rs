//! Full-catalog unsampled ranking metrics, coverage, popularity-bucket
//! breakdowns, embedding-spectrum diagnostics, and the positive/negative
//! score-density overlap factor.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DatasetBundle;
use crate::encoder::{encode, score_all, Parameters, ScoreVector};
use crate::{Error, ItemId, Result, UserId};

/// One user's ranked recommendation list (descending score, ties broken by
/// ascending item id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

/// Top-k item ids by score; deterministic under tied scores.
pub fn top_k_by_score(scores: &ScoreVector, k: usize, exclude: Option<&BTreeSet<ItemId>>) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = (1..=scores.scores.len() as ItemId)
        .filter(|id| exclude.map_or(true, |ex| !ex.contains(id)))
        .collect();
    ids.sort_by(|&a, &b| {
        scores
            .score(b)
            .total_cmp(&scores.score(a))
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Encodes each user's history (truncated to the model window) and ranks the
/// full catalog. Users whose usable history is empty are skipped and counted.
///
/// With `filter_history`, items already in the user's history are removed
/// from the candidate pool before ranking (opt-in; the default ranks the
/// full catalog).
pub fn rank(
    params: &Parameters,
    users: &[(UserId, &[ItemId])],
    k_max: usize,
    filter_history: bool,
) -> (Vec<RankedList>, usize) {
    let n = params.config.max_len;
    let outputs: Vec<Option<RankedList>> = users
        .par_iter()
        .map(|&(user, history)| {
            if history.is_empty() {
                return None;
            }
            let start = history.len().saturating_sub(n);
            let prefix = &history[start..];
            let z = encode(params, prefix).ok()?;
            let scores = score_all(params, &z);
            let exclude: Option<BTreeSet<ItemId>> = filter_history
                .then(|| history.iter().copied().collect());
            Some(RankedList {
                user,
                items: top_k_by_score(&scores, k_max, exclude.as_ref()),
            })
        })
        .collect();
    let skipped = outputs.iter().filter(|o| o.is_none()).count();
    (outputs.into_iter().flatten().collect(), skipped)
}

fn rank_of(list: &RankedList, item: ItemId) -> Option<usize> {
    list.items.iter().position(|&i| i == item).map(|p| p + 1)
}

/// Fraction of users whose held-out item appears in their top-k.
pub fn hit_rate_at(
    ranked: &[RankedList],
    truth: &BTreeMap<UserId, ItemId>,
    k: usize,
) -> Result<f64> {
    assert!(k >= 1, "k must be >= 1");
    if ranked.is_empty() {
        return Err(Error::Metric("hit rate over an empty user set".into()));
    }
    let mut hits = 0usize;
    for list in ranked {
        let item = truth
            .get(&list.user)
            .ok_or_else(|| Error::Metric(format!("user {} missing from truth", list.user)))?;
        if rank_of(list, *item).is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean over users of 1/log2(rank + 1) when the single relevant item ranks
/// within the top-k, else 0.
pub fn ndcg_at(ranked: &[RankedList], truth: &BTreeMap<UserId, ItemId>, k: usize) -> Result<f64> {
    assert!(k >= 1, "k must be >= 1");
    if ranked.is_empty() {
        return Err(Error::Metric("ndcg over an empty user set".into()));
    }
    let mut sum = 0.0;
    for list in ranked {
        let item = truth
            .get(&list.user)
            .ok_or_else(|| Error::Metric(format!("user {} missing from truth", list.user)))?;
        if let Some(r) = rank_of(list, *item) {
            if r <= k {
                sum += 1.0 / ((r as f64) + 1.0).log2();
            }
        }
    }
    Ok(sum / ranked.len() as f64)
}

/// Fraction of the catalog appearing in any user's top-k.
pub fn coverage_at(ranked: &[RankedList], catalog_size: u32, k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let mut seen: BTreeSet<ItemId> = BTreeSet::new();
    for list in ranked {
        seen.extend(list.items.iter().take(k).copied());
    }
    seen.len() as f64 / catalog_size as f64
}

/// Three popularity buckets over the train-observed catalog, most to least
/// popular, each holding roughly one third of train interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSpec {
    pub buckets: [Vec<ItemId>; 3],
}

impl BucketSpec {
    pub fn bucket_of(&self, item: ItemId) -> Option<usize> {
        self.buckets.iter().position(|b| b.contains(&item))
    }
}

/// Greedy bucket construction: walk items by descending train count (ties by
/// ascending id); buckets 1 and 2 each close once they hold at least a third
/// of total interactions, the remainder forms bucket 3. Integer arithmetic,
/// so boundary shares are exact.
pub fn popularity_buckets(item_counts: &[usize]) -> Result<BucketSpec> {
    let mut items: Vec<ItemId> = (1..item_counts.len() as ItemId)
        .filter(|&i| item_counts[i as usize] > 0)
        .collect();
    if items.is_empty() {
        return Err(Error::EmptyCorpus("no train interactions to bucket".into()));
    }
    items.sort_by(|&a, &b| {
        item_counts[b as usize]
            .cmp(&item_counts[a as usize])
            .then(a.cmp(&b))
    });
    let total: usize = items.iter().map(|&i| item_counts[i as usize]).sum();

    let mut buckets: [Vec<ItemId>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = items.into_iter();
    for slot in 0..2 {
        let mut mass = 0usize;
        for item in cursor.by_ref() {
            buckets[slot].push(item);
            mass += item_counts[item as usize];
            if 3 * mass >= total {
                break;
            }
        }
    }
    buckets[2] = cursor.collect();
    Ok(BucketSpec { buckets })
}

/// Per-bucket hit rates over the test users whose test item falls in that
/// bucket; buckets without test users report absent metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: usize,
    pub items: usize,
    pub test_users: usize,
    pub hr1: Option<f64>,
    pub hr10: Option<f64>,
}

pub fn bucket_metrics(
    ranked: &[RankedList],
    truth: &BTreeMap<UserId, ItemId>,
    spec: &BucketSpec,
) -> Result<Vec<BucketReport>> {
    let mut member: BTreeMap<ItemId, usize> = BTreeMap::new();
    for (b, items) in spec.buckets.iter().enumerate() {
        for &i in items {
            member.insert(i, b);
        }
    }
    let mut grouped: [Vec<&RankedList>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for list in ranked {
        let item = truth
            .get(&list.user)
            .ok_or_else(|| Error::Metric(format!("user {} missing from truth", list.user)))?;
        if let Some(&b) = member.get(item) {
            grouped[b].push(list);
        }
    }
    let mut out = Vec::with_capacity(3);
    for (b, lists) in grouped.iter().enumerate() {
        let (hr1, hr10) = if lists.is_empty() {
            (None, None)
        } else {
            let hits = |k: usize| {
                let h = lists
                    .iter()
                    .filter(|l| rank_of(l, truth[&l.user]).is_some_and(|r| r <= k))
                    .count();
                h as f64 / lists.len() as f64
            };
            (Some(hits(1)), Some(hits(10)))
        };
        out.push(BucketReport {
            bucket: b + 1,
            items: spec.buckets[b].len(),
            test_users: lists.len(),
            hr1,
            hr10,
        });
    }
    Ok(out)
}

/// Singular spectrum of an embedding matrix and its effective rank: the
/// exponential of the Shannon entropy of the normalized singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub effective_rank: f64,
}

pub fn effective_rank(embeddings: &Array2<f64>) -> Result<SpectrumReport> {
    let (rows, cols) = embeddings.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::DegenerateInput("empty embedding matrix".into()));
    }
    let m = nalgebra::DMatrix::from_row_iterator(rows, cols, embeddings.iter().copied());
    let svd = m.svd(false, false);
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    spectrum_from_singular_values(singular_values)
}

/// Normalization + entropy step, shared by [`effective_rank`] and callers
/// that already hold a spectrum.
pub fn spectrum_from_singular_values(singular_values: Vec<f64>) -> Result<SpectrumReport> {
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput(
            "all singular values are zero".into(),
        ));
    }
    let normalized: Vec<f64> = singular_values.iter().map(|&s| s / total).collect();
    let entropy: f64 = normalized
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(SpectrumReport {
        singular_values,
        normalized,
        effective_rank: entropy.exp(),
    })
}

/// Density-normalized histograms of two score samples over their joint range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub pos_mass: Vec<f64>,
    pub neg_mass: Vec<f64>,
}

pub fn score_histograms(pos: &[f64], neg: &[f64], bins: usize) -> Result<ScoreHistogram> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(
            "score overlap needs nonempty positive and negative samples".into(),
        ));
    }
    if bins < 2 {
        return Err(Error::InvalidInput("need at least 2 bins".into()));
    }
    let all = pos.iter().chain(neg.iter());
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidInput("non-finite scores".into()));
    }
    let mut pos_mass = vec![0.0; bins];
    let mut neg_mass = vec![0.0; bins];
    if lo == hi {
        // All scores identical: full mass in one bin, overlap 1 by convention.
        pos_mass[0] = 1.0;
        neg_mass[0] = 1.0;
        return Ok(ScoreHistogram {
            lo,
            hi,
            bins,
            pos_mass,
            neg_mass,
        });
    }
    let width = (hi - lo) / bins as f64;
    let index = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    for &x in pos {
        pos_mass[index(x)] += 1.0 / pos.len() as f64;
    }
    for &x in neg {
        neg_mass[index(x)] += 1.0 / neg.len() as f64;
    }
    Ok(ScoreHistogram {
        lo,
        hi,
        bins,
        pos_mass,
        neg_mass,
    })
}

/// Summed bin-wise minimum of the two normalized histograms; 0 means fully
/// separated score distributions, 1 means indistinguishable.
pub fn score_overlap(pos: &[f64], neg: &[f64], bins: usize) -> Result<f64> {
    let h = score_histograms(pos, neg, bins)?;
    Ok(h.pos_mass
        .iter()
        .zip(&h.neg_mass)
        .map(|(&p, &q)| p.min(q))
        .sum())
}

/// Evaluation settings, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// K values for hr@K and ndcg@K.
    pub ks_rank: Vec<usize>,
    /// K values for cov@K.
    pub ks_cov: Vec<usize>,
    pub bins: usize,
    /// Exclude each user's consumed items from their ranking (opt-in).
    pub filter_history: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks_rank: vec![1, 5, 10, 50],
            ks_cov: vec![1, 5, 10],
            bins: 50,
            filter_history: false,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ks_rank.is_empty() || self.ks_rank.iter().any(|&k| k == 0) {
            return Err(Error::Config("ks_rank must be nonempty positive".into()));
        }
        if self.ks_cov.is_empty() || self.ks_cov.iter().any(|&k| k == 0) {
            return Err(Error::Config("ks_cov must be nonempty positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// The full evaluation artifact; serialized as JSON with a fixed field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub model_config: crate::encoder::ModelConfig,
    pub options: EvalOptions,
    pub catalog_size: u32,
    pub num_test_users: usize,
    pub skipped_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub cov: BTreeMap<usize, f64>,
    pub buckets: Vec<BucketReport>,
    pub overlap_factor: f64,
    pub spectrum: SpectrumReport,
}

/// Report plus the plotting sidecar data that does not belong in the JSON.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub histogram: ScoreHistogram,
}

/// Runs the complete evaluation over the bundle's test pool.
pub fn evaluate(
    params: &Parameters,
    bundle: &DatasetBundle,
    options: &EvalOptions,
    seed: u64,
) -> Result<EvalOutput> {
    options.validate()?;
    if params.config.num_items != bundle.num_items {
        return Err(Error::Config(format!(
            "checkpoint catalog ({}) does not match bundle ({})",
            params.config.num_items, bundle.num_items
        )));
    }

    let truth: BTreeMap<UserId, ItemId> = bundle
        .heldout
        .iter()
        .map(|(&u, h)| (u, h.test))
        .collect();
    let histories: Vec<(UserId, &[ItemId])> = bundle
        .heldout
        .iter()
        .map(|(&u, h)| (u, h.test_history.as_slice()))
        .collect();

    let k_max = options
        .ks_rank
        .iter()
        .chain(options.ks_cov.iter())
        .copied()
        .max()
        .unwrap_or(10)
        .max(10);
    let (ranked, skipped) = rank(params, &histories, k_max, options.filter_history);
    if ranked.is_empty() {
        return Err(Error::Metric("no test user had a usable history".into()));
    }

    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in &options.ks_rank {
        hr.insert(k, hit_rate_at(&ranked, &truth, k)?);
        ndcg.insert(k, ndcg_at(&ranked, &truth, k)?);
    }
    let mut cov = BTreeMap::new();
    for &k in &options.ks_cov {
        cov.insert(k, coverage_at(&ranked, bundle.num_items, k));
    }

    let spec = popularity_buckets(&bundle.train_item_counts())?;
    let buckets = bucket_metrics(&ranked, &truth, &spec)?;

    // Sequence embeddings and test-item scores for the ranked users, in user
    // order (embeddings feed the spectrum, scores feed the overlap factor).
    let n = params.config.max_len;
    let per_user: Vec<(Array1<f64>, f64, Vec<f64>)> = ranked
        .par_iter()
        .map(|list| {
            let h = &bundle.heldout[&list.user];
            let start = h.test_history.len().saturating_sub(n);
            let z = encode(params, &h.test_history[start..]).expect("ranked user re-encode");
            let scores = score_all(params, &z);
            let pos = scores.score(h.test);
            let negs: Vec<f64> = (1..=bundle.num_items)
                .filter(|&i| i != h.test)
                .map(|i| scores.score(i))
                .collect();
            (z.vector, pos, negs)
        })
        .collect();

    let dim = params.config.dim;
    let mut embeddings = Array2::zeros((per_user.len(), dim));
    let mut pos_scores = Vec::with_capacity(per_user.len());
    let mut neg_scores = Vec::new();
    for (i, (z, pos, negs)) in per_user.into_iter().enumerate() {
        embeddings.row_mut(i).assign(&z);
        pos_scores.push(pos);
        neg_scores.extend(negs);
    }
    let spectrum = effective_rank(&embeddings)?;
    let histogram = score_histograms(&pos_scores, &neg_scores, options.bins)?;
    let overlap_factor = histogram
        .pos_mass
        .iter()
        .zip(&histogram.neg_mass)
        .map(|(&p, &q)| p.min(q))
        .sum();

    let config_hash = {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&params.config)?);
        hasher.update(serde_json::to_vec(options)?);
        hasher.update(seed.to_le_bytes());
        format!("{:x}", hasher.finalize())
    };

    let report = EvalReport {
        seed,
        config_hash,
        model_config: params.config.clone(),
        options: options.clone(),
        catalog_size: bundle.num_items,
        num_test_users: ranked.len(),
        skipped_users: skipped,
        hr,
        ndcg,
        cov,
        buckets,
        overlap_factor,
        spectrum,
    };
    Ok(EvalOutput { report, histogram })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV rendering of the spectrum for external plotting.
pub fn spectrum_csv(spectrum: &SpectrumReport) -> String {
    let mut out = String::from("index,singular_value,normalized\n");
    for (i, (s, p)) in spectrum
        .singular_values
        .iter()
        .zip(&spectrum.normalized)
        .enumerate()
    {
        out.push_str(&format!(
            "{},{},{}\n",
            i + 1,
            crate::util::fmt_f64(*s),
            crate::util::fmt_f64(*p)
        ));
    }
    out
}

/// CSV rendering of the score histograms.
pub fn histogram_csv(h: &ScoreHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,pos_mass,neg_mass\n");
    let width = if h.hi > h.lo {
        (h.hi - h.lo) / h.bins as f64
    } else {
        0.0
    };
    for b in 0..h.bins {
        out.push_str(&format!(
            "{},{},{},{}\n",
            crate::util::fmt_f64(h.lo + width * b as f64),
            crate::util::fmt_f64(h.lo + width * (b + 1) as f64),
            crate::util::fmt_f64(h.pos_mass[b]),
            crate::util::fmt_f64(h.neg_mass[b])
        ));
    }
    out
}
