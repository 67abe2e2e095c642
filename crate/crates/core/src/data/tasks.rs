use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, EncodedCatalog, EncodedProfile, RawDataset};
use crate::numerics::BagRows;

/// Users with fewer interactions are dropped.
pub const MIN_INTERACTIONS: usize = 13;
/// Most recent interactions held out per user.
pub const QUERY_SIZE: usize = 10;
/// Upper bound on the support set (most recent interactions kept).
pub const SUPPORT_CAP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rated {
    pub item: usize,
    pub rating: u8,
    pub timestamp: i64,
}

/// A list of rated items with their item-side embedding bags precomputed
/// (one [`BagRows`] per item content block, one row per pair).
#[derive(Clone, Debug)]
pub struct PairSet {
    pub pairs: Vec<Rated>,
    /// Class index of each rating (`rating - rating_min`).
    pub targets: Vec<usize>,
    pub item_bags: Vec<BagRows>,
}

impl PairSet {
    pub fn new(pairs: Vec<Rated>, items: &EncodedCatalog, rating_min: u8) -> Self {
        let targets = pairs.iter().map(|p| (p.rating - rating_min) as usize).collect();
        let item_bags = (0..items.vocab.len())
            .map(|b| {
                Arc::new(
                    pairs
                        .iter()
                        .map(|p| items.profiles[p.item].blocks[b].bag())
                        .collect(),
                )
            })
            .collect();
        Self {
            pairs,
            targets,
            item_bags,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ratings(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.rating as f64).collect()
    }

    pub fn items(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.item).collect()
    }
}

/// What test-time fine-tuning may see: profile features and the support set.
/// The sensitive label is deliberately absent.
#[derive(Clone, Copy, Debug)]
pub struct SupportView<'a> {
    pub user: usize,
    pub profile: &'a EncodedProfile,
    pub user_bags: &'a [BagRows],
    pub support: &'a PairSet,
}

/// One user's meta-learning task.
#[derive(Debug)]
pub struct UserTask {
    /// Index of the user in the raw dataset.
    pub user: usize,
    pub user_id: String,
    pub profile: EncodedProfile,
    pub user_bags: Vec<BagRows>,
    pub support: PairSet,
    pub query: PairSet,
    label: usize,
    label_reads: AtomicUsize,
}

impl Clone for UserTask {
    fn clone(&self) -> Self {
        Self {
            user: self.user,
            user_id: self.user_id.clone(),
            profile: self.profile.clone(),
            user_bags: self.user_bags.clone(),
            support: self.support.clone(),
            query: self.query.clone(),
            label: self.label,
            label_reads: AtomicUsize::new(self.label_reads.load(Ordering::Relaxed)),
        }
    }
}

impl UserTask {
    pub fn new(
        user: usize,
        user_id: String,
        profile: EncodedProfile,
        label: usize,
        support: PairSet,
        query: PairSet,
    ) -> Self {
        let user_bags = profile.bag_rows();
        Self {
            user,
            user_id,
            profile,
            user_bags,
            support,
            query,
            label,
            label_reads: AtomicUsize::new(0),
        }
    }

    /// Sensitive class `a_u`. Every call is counted.
    pub fn sensitive_label(&self) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.label
    }

    /// Number of [`Self::sensitive_label`] calls so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn support_view(&self) -> SupportView<'_> {
        SupportView {
            user: self.user,
            profile: &self.profile,
            user_bags: &self.user_bags,
            support: &self.support,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

/// Seeded uniform shuffle of `users` (taken in ascending order first), then a
/// contiguous `floor(n·r_train) / floor(n·r_valid) / remainder` partition.
pub fn split_users(users: &[usize], ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec, DataError> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut order = users.to_vec();
    order.sort_unstable();
    order.dedup();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    // the epsilon keeps e.g. 10·0.7 from flooring to 6
    let n_train = (n * tr + 1e-9).floor() as usize;
    let n_valid = (n * va + 1e-9).floor() as usize;
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(SplitSpec {
        train: order,
        valid,
        test,
        ratios,
        seed,
    })
}

/// Train/valid/test task lists, each sorted by user index.
#[derive(Clone, Debug)]
pub struct TaskSets {
    pub train: Vec<UserTask>,
    pub valid: Vec<UserTask>,
    pub test: Vec<UserTask>,
    /// Users dropped for too few interactions or a missing sensitive value.
    pub dropped: usize,
    pub rating_min: u8,
    pub rating_levels: usize,
    pub sensitive_classes: usize,
}

/// Per-user interactions in chronological order, ties broken by item index.
fn history(raw: &RawDataset) -> BTreeMap<usize, Vec<Rated>> {
    let mut by_user: BTreeMap<usize, Vec<Rated>> = BTreeMap::new();
    for i in &raw.interactions {
        by_user.entry(i.user).or_default().push(Rated {
            item: i.item,
            rating: i.rating,
            timestamp: i.timestamp,
        });
    }
    for h in by_user.values_mut() {
        h.sort_by_key(|r| (r.timestamp, r.item));
    }
    by_user
}

/// Users with at least [`MIN_INTERACTIONS`] interactions and a sensitive
/// value, ascending.
pub fn retained_users(raw: &RawDataset, users: &EncodedCatalog) -> Vec<usize> {
    let hist = history(raw);
    (0..raw.users.len())
        .filter(|u| hist.get(u).map_or(0, Vec::len) >= MIN_INTERACTIONS)
        .filter(|&u| users.profiles[u].sensitive_label().is_some())
        .collect()
}

/// Splits a chronological history into `(support, query)`.
pub fn support_query(history: &[Rated]) -> Option<(Vec<Rated>, Vec<Rated>)> {
    if history.len() < MIN_INTERACTIONS {
        return None;
    }
    let cut = history.len() - QUERY_SIZE;
    let query = history[cut..].to_vec();
    let start = cut.saturating_sub(SUPPORT_CAP);
    Some((history[start..cut].to_vec(), query))
}

pub fn build_tasks(
    raw: &RawDataset,
    users: &EncodedCatalog,
    items: &EncodedCatalog,
    split: &SplitSpec,
) -> Result<TaskSets, DataError> {
    let hist = history(raw);
    let empty = Vec::new();
    let mut dropped = 0;
    let mut build = |ids: &[usize]| -> Vec<UserTask> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        let mut out = Vec::with_capacity(ids.len());
        for u in ids {
            let profile = &users.profiles[u];
            let split = support_query(hist.get(&u).unwrap_or(&empty));
            match (split, profile.sensitive_label()) {
                (Some((s, q)), Some(label)) => out.push(UserTask::new(
                    u,
                    raw.users[u].id.clone(),
                    profile.clone(),
                    label,
                    PairSet::new(s, items, raw.rating_min),
                    PairSet::new(q, items, raw.rating_min),
                )),
                _ => dropped += 1,
            }
        }
        out
    };
    let train = build(&split.train);
    let valid = build(&split.valid);
    let test = build(&split.test);
    let sensitive_classes = users
        .sensitive_classes()
        .map(<[String]>::len)
        .ok_or_else(|| DataError::Config("user catalog has no sensitive attribute".into()))?;
    Ok(TaskSets {
        train,
        valid,
        test,
        dropped,
        rating_min: raw.rating_min,
        rating_levels: raw.rating_levels(),
        sensitive_classes,
    })
}
