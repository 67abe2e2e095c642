//! Dataset ingestion, profile encoding and per-user task construction.

mod encode;
mod load;
mod tasks;

pub use encode::{encode_items, encode_users, BlockVocab, EncodedCatalog, EncodedProfile, FeatureBlock};
pub use load::{load_movielens, load_raw, Schema};
pub(crate) use load::ML100K_GENRES;
pub use tasks::{
    build_tasks, retained_users, split_users, support_query, PairSet, Rated, SplitSpec, SupportView,
    TaskSets, UserTask,
    MIN_INTERACTIONS, QUERY_SIZE, SUPPORT_CAP,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {rejected} of {total} rows unparseable (first: {first})")]
    TooManyRejects {
        file: String,
        rejected: usize,
        total: usize,
        first: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

/// How a raw content value is turned into a category label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    /// The raw string is the category.
    Categorical,
    /// Several categories per record (genres); embeddings are averaged.
    MultiValued,
    /// Raw ages folded into the seven MovieLens-1M bands.
    AgeBands,
    /// Postal codes reduced to their first digit.
    ZipPrefix,
    /// Numeric value split at the observed median into `young`/`old`.
    MedianSplit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentSpec {
    pub name: String,
    pub kind: ContentKind,
}

impl ContentSpec {
    pub fn new(name: &str, kind: ContentKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
        }
    }
}

/// A user or item with its raw content values (empty vector = missing).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub contents: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub timestamp: i64,
}

/// One rejected input row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowReject {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

/// Fully cross-referenced dataset: `Interaction::user`/`item` index into
/// `users`/`items`. Items are ordered by ascending id.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub schema: Schema,
    pub users: Vec<Record>,
    pub items: Vec<Record>,
    pub interactions: Vec<Interaction>,
    pub rating_min: u8,
    pub rating_max: u8,
    pub user_contents: Vec<ContentSpec>,
    pub item_contents: Vec<ContentSpec>,
    pub rejects: Vec<RowReject>,
    /// Interactions dropped because they named an unknown user or item.
    pub dangling: usize,
    /// Implicit-feedback rows (rating 0) skipped by the BookCrossing loader.
    pub implicit_skipped: usize,
}

impl RawDataset {
    pub fn rating_levels(&self) -> usize {
        (self.rating_max - self.rating_min) as usize + 1
    }

    /// Checks the cross-reference and rating-range invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        for (n, i) in self.interactions.iter().enumerate() {
            if i.user >= self.users.len() || i.item >= self.items.len() {
                return Err(DataError::Config(format!("interaction {n} has a dangling reference")));
            }
            if i.rating < self.rating_min || i.rating > self.rating_max {
                return Err(DataError::Config(format!(
                    "interaction {n} rating {} outside {}..={}",
                    i.rating, self.rating_min, self.rating_max
                )));
            }
        }
        Ok(())
    }
}

/// Encoded catalogs, split and tasks built from one raw dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: RawDataset,
    pub users: EncodedCatalog,
    pub items: EncodedCatalog,
    pub split: SplitSpec,
    pub tasks: TaskSets,
}

/// Encodes profiles, splits the retained users `ratios` with `split_seed` and
/// builds their tasks.
pub fn prepare(
    raw: RawDataset,
    sensitive: &str,
    ratios: (f64, f64, f64),
    split_seed: u64,
) -> Result<Prepared, DataError> {
    raw.validate()?;
    let users = encode_users(&raw, sensitive)?;
    let items = encode_items(&raw)?;
    let retained = retained_users(&raw, &users);
    let split = split_users(&retained, ratios, split_seed)?;
    let mut tasks = build_tasks(&raw, &users, &items, &split)?;
    tasks.dropped += raw.users.len() - retained.len();
    log::info!(
        "{} users retained ({} dropped): {} train / {} valid / {} test",
        retained.len(),
        tasks.dropped,
        tasks.train.len(),
        tasks.valid.len(),
        tasks.test.len()
    );
    Ok(Prepared {
        raw,
        users,
        items,
        split,
        tasks,
    })
}
