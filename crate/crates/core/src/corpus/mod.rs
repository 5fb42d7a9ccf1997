//! Review ingestion, dataset statistics and train/validation/test splits.

mod split;
pub mod synthetic;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use split::{
    explanation_sizes, load_splits, save_splits, split_explanation, split_leave_one_out, ExplanationSplit, SeqSplit,
    SplitSet, SplitTag, UserSequence,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("review set is empty")]
    Empty,
    #[error("no trainable users: every user has fewer than {min_len} interactions")]
    NoTrainableUsers { min_len: usize },
    #[error("min_len must be at least 3, got {0}")]
    MinLen(usize),
    #[error("split file {path}: {message}")]
    BadSplit { path: PathBuf, message: String },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One line of the input format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user: String,
    pub item: String,
    pub text: String,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub review_text: String,
    pub ts: i64,
    /// Position in the user's chronological history, from 0.
    pub order_index: usize,
}

impl Interaction {
    pub fn has_review(&self) -> bool {
        !self.review_text.trim().is_empty()
    }

    pub fn record(&self) -> ReviewRecord {
        ReviewRecord {
            user: self.user_id.clone(),
            item: self.item_id.clone(),
            text: self.review_text.clone(),
            ts: self.ts,
        }
    }
}

/// Interactions in input order, indexed by user (chronological) and item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReviewSet {
    interactions: Vec<Interaction>,
    by_user: IndexMap<String, Vec<usize>>,
    by_item: IndexMap<String, Vec<usize>>,
}

impl ReviewSet {
    /// Assigns `order_index` per user by ascending `ts`, ties in input order.
    pub fn from_records(records: impl IntoIterator<Item = ReviewRecord>) -> Self {
        let mut interactions: Vec<Interaction> = records
            .into_iter()
            .map(|r| Interaction {
                user_id: r.user,
                item_id: r.item,
                review_text: r.text,
                ts: r.ts,
                order_index: 0,
            })
            .collect();
        let mut by_user: IndexMap<String, Vec<usize>> = IndexMap::new();
        let mut by_item: IndexMap<String, Vec<usize>> = IndexMap::new();
        for (i, x) in interactions.iter().enumerate() {
            by_user.entry(x.user_id.clone()).or_default().push(i);
            by_item.entry(x.item_id.clone()).or_default().push(i);
        }
        for list in by_user.values_mut() {
            list.sort_by_key(|&i| interactions[i].ts);
            for (pos, &i) in list.iter().enumerate() {
                interactions[i].order_index = pos;
            }
        }
        Self {
            interactions,
            by_user,
            by_item,
        }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(String::as_str)
    }

    /// The user's interactions in chronological order.
    pub fn user_history(&self, user: &str) -> impl Iterator<Item = &Interaction> {
        self.by_user
            .get(user)
            .into_iter()
            .flatten()
            .map(|&i| &self.interactions[i])
    }

    /// The user's item ids in chronological order.
    pub fn user_items(&self, user: &str) -> Vec<&str> {
        self.user_history(user).map(|x| x.item_id.as_str()).collect()
    }

    /// Users who reviewed `item`, in input order.
    pub fn item_users(&self, item: &str) -> Vec<&str> {
        self.by_item
            .get(item)
            .into_iter()
            .flatten()
            .map(|&i| self.interactions[i].user_id.as_str())
            .collect()
    }

    /// Records in input order; reloading them reproduces this set.
    pub fn records(&self) -> Vec<ReviewRecord> {
        self.interactions.iter().map(Interaction::record).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Skip malformed lines instead of aborting.
    pub lenient: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    pub skipped: Vec<(usize, String)>,
    pub duplicates: usize,
}

pub fn load_reviews(path: &Path, opts: &LoadOptions) -> Result<(ReviewSet, LoadReport), CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut report = LoadReport::default();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let record: ReviewRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                if opts.lenient {
                    log::warn!("{}:{lineno}: skipping malformed record: {e}", path.display());
                    report.skipped.push((lineno, e.to_string()));
                    continue;
                }
                return Err(CorpusError::Malformed {
                    line: lineno,
                    message: e.to_string(),
                });
            }
        };
        if !seen.insert((record.user.clone(), record.item.clone(), record.ts)) {
            log::warn!(
                "{}:{lineno}: duplicate (user, item, ts) = ({}, {}, {}); kept",
                path.display(),
                record.user,
                record.item,
                record.ts
            );
            report.duplicates += 1;
        }
        records.push(record);
    }
    report.loaded = records.len();
    log::info!(
        "loaded {} interactions from {} ({} skipped, {} duplicates)",
        report.loaded,
        path.display(),
        report.skipped.len(),
        report.duplicates
    );
    Ok((ReviewSet::from_records(records), report))
}

/// One JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).expect("record serialises");
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a ReviewRecord>) -> Result<(), CorpusError> {
    write_jsonl(path, records)
}

pub fn write_reviews(path: &Path, rs: &ReviewSet) -> Result<(), CorpusError> {
    write_records(path, &rs.records())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_reviews: usize,
    pub avg_reviews_per_user: f64,
    pub density_percent: f64,
}

impl DatasetStats {
    pub fn from_counts(n_users: usize, n_items: usize, n_reviews: usize) -> Result<Self, CorpusError> {
        if n_users == 0 || n_items == 0 || n_reviews == 0 {
            return Err(CorpusError::Empty);
        }
        Ok(Self {
            n_users,
            n_items,
            n_reviews,
            avg_reviews_per_user: n_reviews as f64 / n_users as f64,
            density_percent: 100.0 * n_reviews as f64 / (n_users as f64 * n_items as f64),
        })
    }

    /// Aligned two-column table; density to 4 decimals, average to 1.
    pub fn table(&self) -> String {
        let rows = [
            ("#Users", self.n_users.to_string()),
            ("#Items", self.n_items.to_string()),
            ("#Reviews", self.n_reviews.to_string()),
            ("#Avg/user", format!("{:.1}", self.avg_reviews_per_user)),
            ("Density(%)", format!("{:.4}", self.density_percent)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<12}{v:>12}\n"));
        }
        out
    }
}

pub fn compute_stats(rs: &ReviewSet) -> Result<DatasetStats, CorpusError> {
    DatasetStats::from_counts(rs.n_users(), rs.n_items(), rs.len())
}

/// Dense 1-based numbers rendered as `user_{n}` / `item_{n}`. Users are
/// numbered in order of first appearance; items in order of first
/// appearance while walking each user's history chronologically
/// (sequential indexing), so items that follow one another get nearby
/// numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityIndex {
    users: IndexSet<String>,
    items: IndexSet<String>,
}

impl EntityIndex {
    pub fn from_reviews(rs: &ReviewSet) -> Self {
        let mut idx = Self::default();
        for user in rs.users() {
            idx.users.insert(user.to_string());
            for x in rs.user_history(user) {
                idx.items.insert(x.item_id.clone());
            }
        }
        idx
    }

    pub fn user_number(&self, user: &str) -> Option<u32> {
        self.users.get_index_of(user).map(|i| i as u32 + 1)
    }

    pub fn item_number(&self, item: &str) -> Option<u32> {
        self.items.get_index_of(item).map(|i| i as u32 + 1)
    }

    pub fn item_id(&self, number: u32) -> Option<&str> {
        let i = (number as usize).checked_sub(1)?;
        self.items.get_index(i).map(String::as_str)
    }

    pub fn user_id(&self, number: u32) -> Option<&str> {
        let i = (number as usize).checked_sub(1)?;
        self.users.get_index(i).map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Item numbers 1..=n_items.
    pub fn item_numbers(&self) -> impl Iterator<Item = u32> {
        1..=self.items.len() as u32
    }
}
