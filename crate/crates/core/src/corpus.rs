//! Interaction-log ingestion, core filtering, temporal splitting, and
//! training-example materialization.
//!
//! Raw logs are delimited text with columns `user, item, timestamp`. Ids may
//! be arbitrary tokens; they are re-indexed to dense integers starting at 1
//! (0 is reserved for padding). The split is a global-timestamp split at a
//! quantile boundary followed by a per-user leave-one-out protocol over the
//! post-boundary events.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, ItemId, Result, Timestamp, UserId, PADDING_ID};

/// One (user, item, time) event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub time: Timestamp,
}

/// A corpus of events over dense 1-based user/item ids.
///
/// `num_users` / `num_items` give the id-space bounds, not necessarily the
/// number of distinct ids present (filtering can leave holes until the log is
/// re-compacted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
    pub num_users: u32,
    pub num_items: u32,
}

/// Dense-id to original-token maps; index = dense id - 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Held-out points and encode-time histories for one test-pool user.
///
/// Histories hold, in chronological order, every event strictly before the
/// held-out event; the validation history therefore never contains the test
/// item, while the test history may contain the validation item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub validation: ItemId,
    pub test: ItemId,
    pub val_history: Vec<ItemId>,
    pub test_history: Vec<ItemId>,
}

/// Result of the temporal split + leave-one-out protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: InteractionLog,
    pub boundary: Timestamp,
    pub heldout: BTreeMap<UserId, HeldOut>,
    /// Users with post-boundary events that could not yield a (validation,
    /// test) pair and were dropped from the pool.
    pub dropped_users: usize,
    /// Test users whose validation point fell back to their last train event.
    pub single_event_fallbacks: usize,
}

/// A fixed-length training sequence: left-padded prefix plus next-item label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

impl TrainingExample {
    /// The prefix without its left padding.
    pub fn real_prefix(&self) -> &[ItemId] {
        let start = self
            .prefix
            .iter()
            .position(|&i| i != PADDING_ID)
            .unwrap_or(self.prefix.len());
        &self.prefix[start..]
    }
}

/// Parses a delimited interaction log and re-indexes ids densely.
///
/// Ids are assigned in order of first appearance, separately for users and
/// items, starting at 1. Rows must have exactly three fields; the timestamp
/// must parse as a non-negative integer.
pub fn load_log(path: &Path, delimiter: char) -> Result<(InteractionLog, IdMaps)> {
    let text = std::fs::read_to_string(path)?;
    parse_log(&text, delimiter)
}

/// [`load_log`] over in-memory text; the file loader delegates here.
pub fn parse_log(text: &str, delimiter: char) -> Result<(InteractionLog, IdMaps)> {
    let mut user_ids: BTreeMap<&str, UserId> = BTreeMap::new();
    let mut item_ids: BTreeMap<&str, ItemId> = BTreeMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut events = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut fields = line.split(delimiter);
        let (user_tok, item_tok, time_tok) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(t)) if fields.next().is_none() => (u, i, t),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 3 fields separated by {delimiter:?}"),
                })
            }
        };
        let time: Timestamp = time_tok.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("timestamp {time_tok:?} is not a non-negative integer"),
        })?;
        let user = *user_ids.entry(user_tok).or_insert_with(|| {
            users.push(user_tok.to_string());
            users.len() as UserId
        });
        let item = *item_ids.entry(item_tok).or_insert_with(|| {
            items.push(item_tok.to_string());
            items.len() as ItemId
        });
        events.push(Interaction { user, item, time });
    }

    if events.is_empty() {
        return Err(Error::EmptyCorpus("input file has no events".into()));
    }

    Ok((
        InteractionLog {
            events,
            num_users: users.len() as u32,
            num_items: items.len() as u32,
        },
        IdMaps { users, items },
    ))
}

/// Iterative k-core filter: keeps the maximal sub-log in which every
/// remaining user and item has at least `min_count` events.
///
/// Removing a user can push an item below the threshold and vice versa, so
/// passes repeat until a fixed point. Ids are left unchanged; use [`compact`]
/// to re-densify afterwards.
pub fn core_filter(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    assert!(min_count >= 1, "min_count must be >= 1");
    let mut events = log.events.clone();
    loop {
        let mut user_counts = vec![0usize; log.num_users as usize + 1];
        let mut item_counts = vec![0usize; log.num_items as usize + 1];
        for e in &events {
            user_counts[e.user as usize] += 1;
            item_counts[e.item as usize] += 1;
        }
        let before = events.len();
        events.retain(|e| {
            user_counts[e.user as usize] >= min_count && item_counts[e.item as usize] >= min_count
        });
        if events.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "no users or items survive {min_count}-core filtering"
            )));
        }
        if events.len() == before {
            return Ok(InteractionLog {
                events,
                num_users: log.num_users,
                num_items: log.num_items,
            });
        }
    }
}

/// Re-indexes a (possibly filtered) log onto dense ids 1..=count, preserving
/// the relative order of surviving ids, and restricts the label maps.
pub fn compact(log: &InteractionLog, maps: &IdMaps) -> (InteractionLog, IdMaps) {
    let mut user_map = vec![0 as UserId; log.num_users as usize + 1];
    let mut item_map = vec![0 as ItemId; log.num_items as usize + 1];
    for e in &log.events {
        user_map[e.user as usize] = 1;
        item_map[e.item as usize] = 1;
    }
    let mut users = Vec::new();
    let mut next = 0 as UserId;
    for (old, slot) in user_map.iter_mut().enumerate().skip(1) {
        if *slot != 0 {
            next += 1;
            *slot = next;
            users.push(maps.users[old - 1].clone());
        }
    }
    let num_users = next;
    let mut items = Vec::new();
    let mut next = 0 as ItemId;
    for (old, slot) in item_map.iter_mut().enumerate().skip(1) {
        if *slot != 0 {
            next += 1;
            *slot = next;
            items.push(maps.items[old - 1].clone());
        }
    }
    let num_items = next;
    let events = log
        .events
        .iter()
        .map(|e| Interaction {
            user: user_map[e.user as usize],
            item: item_map[e.item as usize],
            time: e.time,
        })
        .collect();
    (
        InteractionLog {
            events,
            num_users,
            num_items,
        },
        IdMaps { users, items },
    )
}

/// Smallest boundary timestamp covering at least ceil(quantile * total)
/// events. The epsilon absorbs binary representation error in decimal
/// quantiles (0.95 * 20 must target 19 events, not 20).
fn quantile_boundary(sorted_times: &[Timestamp], quantile: f64) -> Timestamp {
    let total = sorted_times.len();
    let target = ((quantile * total as f64) - 1e-9).ceil().max(1.0) as usize;
    let target = target.min(total);
    sorted_times[target - 1]
}

/// Global-timestamp split at the quantile boundary, then leave-one-out over
/// each user's post-boundary events.
///
/// Events with timestamp <= boundary form the train log (boundary ties train).
/// A user with >= 2 post-boundary events contributes their last as test and
/// second-to-last as validation. A user with exactly one post-boundary event
/// contributes it as test, with validation falling back to their last train
/// event; users without any train event in that situation are dropped.
/// Per-user event order is the stable sort by timestamp (input order breaks
/// ties).
pub fn temporal_split(log: &InteractionLog, quantile: f64) -> Result<SplitDataset> {
    assert!(
        quantile > 0.0 && quantile < 1.0,
        "quantile must lie in (0, 1)"
    );
    if log.events.is_empty() {
        return Err(Error::EmptyCorpus("cannot split an empty log".into()));
    }

    let mut times: Vec<Timestamp> = log.events.iter().map(|e| e.time).collect();
    times.sort_unstable();
    let boundary = quantile_boundary(&times, quantile);

    // Per-user chronological sequences, stable in input order on ties.
    let mut sequences: BTreeMap<UserId, Vec<(Timestamp, ItemId)>> = BTreeMap::new();
    for e in &log.events {
        sequences.entry(e.user).or_default().push((e.time, e.item));
    }
    for seq in sequences.values_mut() {
        seq.sort_by_key(|&(t, _)| t);
    }

    let train_events: Vec<Interaction> = log
        .events
        .iter()
        .copied()
        .filter(|e| e.time <= boundary)
        .collect();

    let mut heldout = BTreeMap::new();
    let mut dropped_users = 0;
    let mut single_event_fallbacks = 0;
    for (&user, seq) in &sequences {
        let first_post = seq.partition_point(|&(t, _)| t <= boundary);
        let post_len = seq.len() - first_post;
        if post_len == 0 {
            continue;
        }
        let items: Vec<ItemId> = seq.iter().map(|&(_, i)| i).collect();
        let test_pos = seq.len() - 1;
        let (val_pos, fallback) = if post_len >= 2 {
            (test_pos - 1, false)
        } else if first_post > 0 {
            (first_post - 1, true)
        } else {
            dropped_users += 1;
            continue;
        };
        single_event_fallbacks += fallback as usize;
        heldout.insert(
            user,
            HeldOut {
                validation: items[val_pos],
                test: items[test_pos],
                val_history: items[..val_pos].to_vec(),
                test_history: items[..test_pos].to_vec(),
            },
        );
    }

    if heldout.is_empty() {
        return Err(Error::Split(
            "no user qualifies for the test pool (no usable post-boundary events)".into(),
        ));
    }

    Ok(SplitDataset {
        train: InteractionLog {
            events: train_events,
            num_users: log.num_users,
            num_items: log.num_items,
        },
        boundary,
        heldout,
        dropped_users,
        single_event_fallbacks,
    })
}

/// Materializes next-item training examples from the train log.
///
/// For each user with >= 2 train events and each position t >= 2 (1-based),
/// emits the last min(t-1, n) preceding items as a left-padded prefix with
/// the item at t as target. Users with fewer than 2 events contribute nothing.
pub fn build_examples(train: &InteractionLog, n: usize) -> Vec<TrainingExample> {
    assert!(n >= 2, "max sequence length must be >= 2");
    let mut sequences: BTreeMap<UserId, Vec<(Timestamp, ItemId)>> = BTreeMap::new();
    for e in &train.events {
        sequences.entry(e.user).or_default().push((e.time, e.item));
    }
    let mut examples = Vec::new();
    for seq in sequences.values_mut() {
        seq.sort_by_key(|&(t, _)| t);
        let items: Vec<ItemId> = seq.iter().map(|&(_, i)| i).collect();
        for t in 1..items.len() {
            let lo = t.saturating_sub(n);
            let window = &items[lo..t];
            let mut prefix = vec![PADDING_ID; n - window.len()];
            prefix.extend_from_slice(window);
            examples.push(TrainingExample {
                prefix,
                target: items[t],
            });
        }
    }
    examples
}

/// Echo of the preparation inputs, embedded in the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub path: String,
    pub delimiter: char,
    pub min_count: usize,
    pub quantile: f64,
    pub max_len: usize,
}

/// Counts gathered during preparation, for the human-readable summary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub raw_users: u32,
    pub raw_items: u32,
    pub raw_events: usize,
    pub filtered_users: u32,
    pub filtered_items: u32,
    pub filtered_events: usize,
    pub train_events: usize,
    pub test_pool: usize,
    pub dropped_users: usize,
    pub single_event_fallbacks: usize,
}

/// The on-disk dataset artifact: re-index maps, train events, examples, and
/// split metadata. JSON with deterministic field and key order, so
/// save(load(f)) reproduces f byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBundle {
    pub version: u32,
    pub source: SourceMeta,
    pub num_users: u32,
    pub num_items: u32,
    pub boundary: Timestamp,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub train_events: Vec<Interaction>,
    pub examples: Vec<TrainingExample>,
    pub heldout: BTreeMap<UserId, HeldOut>,
    pub stats: PrepareStats,
}

pub const BUNDLE_VERSION: u32 = 1;

impl DatasetBundle {
    /// Runs the full preparation pipeline: load, core-filter, compact,
    /// split, and materialize examples.
    pub fn prepare(input: &Path, source: SourceMeta) -> Result<DatasetBundle> {
        let (raw, raw_maps) = load_log(input, source.delimiter)?;
        let raw_events = raw.events.len();
        let (raw_users, raw_items) = (raw.num_users, raw.num_items);

        let filtered = core_filter(&raw, source.min_count)?;
        let (log, maps) = compact(&filtered, &raw_maps);

        let split = temporal_split(&log, source.quantile)?;
        let examples = build_examples(&split.train, source.max_len);

        let stats = PrepareStats {
            raw_users,
            raw_items,
            raw_events,
            filtered_users: log.num_users,
            filtered_items: log.num_items,
            filtered_events: log.events.len(),
            train_events: split.train.events.len(),
            test_pool: split.heldout.len(),
            dropped_users: split.dropped_users,
            single_event_fallbacks: split.single_event_fallbacks,
        };

        Ok(DatasetBundle {
            version: BUNDLE_VERSION,
            source,
            num_users: log.num_users,
            num_items: log.num_items,
            boundary: split.boundary,
            user_labels: maps.users,
            item_labels: maps.items,
            train_events: split.train.events,
            examples,
            heldout: split.heldout,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::util::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetBundle> {
        let bytes = std::fs::read(path)?;
        let bundle: DatasetBundle = serde_json::from_slice(&bytes)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::Config(format!(
                "dataset bundle version {} unsupported (expected {BUNDLE_VERSION})",
                bundle.version
            )));
        }
        Ok(bundle)
    }

    /// Per-item train interaction counts, indexed by item id (0 unused).
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_items as usize + 1];
        for e in &self.train_events {
            counts[e.item as usize] += 1;
        }
        counts
    }

    /// Multi-line human-readable preparation summary.
    pub fn summary(&self) -> String {
        let s = &self.stats;
        format!(
            "raw: {} users, {} items, {} events\n\
             after {}-core filter: {} users, {} items, {} events\n\
             boundary timestamp: {} (quantile {})\n\
             train events: {}\n\
             test pool: {} users ({} single-event fallbacks, {} dropped)\n\
             training examples (n={}): {}",
            s.raw_users,
            s.raw_items,
            s.raw_events,
            self.source.min_count,
            s.filtered_users,
            s.filtered_items,
            s.filtered_events,
            self.boundary,
            self.source.quantile,
            s.train_events,
            s.test_pool,
            s.single_event_fallbacks,
            s.dropped_users,
            self.source.max_len,
            self.examples.len(),
        )
    }
}
