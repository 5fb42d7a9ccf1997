use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_jsonl, CorpusError, ReviewRecord, ReviewSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Leave-one-out view of one user's chronological items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

impl UserSequence {
    /// Train items, then validation, then test.
    pub fn full(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.train.iter().map(String::as_str).collect();
        v.push(&self.val);
        v.push(&self.test);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SeqSplit {
    pub users: Vec<UserSequence>,
    pub excluded: Vec<String>,
}

/// Interaction indices (into the review set) of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExplanationSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ExplanationSplit {
    pub fn tag_of(&self, n: usize) -> Vec<SplitTag> {
        let mut tags = vec![SplitTag::Train; n];
        for &i in &self.val {
            tags[i] = SplitTag::Val;
        }
        for &i in &self.test {
            tags[i] = SplitTag::Test;
        }
        tags
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSet {
    pub seq: SeqSplit,
    pub expl: ExplanationSplit,
}

pub fn split_leave_one_out(rs: &ReviewSet, min_len: usize) -> Result<SeqSplit, CorpusError> {
    if min_len < 3 {
        return Err(CorpusError::MinLen(min_len));
    }
    let mut out = SeqSplit::default();
    for user in rs.users() {
        let items = rs.user_items(user);
        if items.len() < min_len {
            out.excluded.push(user.to_string());
            continue;
        }
        let n = items.len();
        out.users.push(UserSequence {
            user: user.to_string(),
            train: items[..n - 2].iter().map(|s| s.to_string()).collect(),
            val: items[n - 2].to_string(),
            test: items[n - 1].to_string(),
        });
    }
    if !out.excluded.is_empty() {
        log::info!("{} users below min_len {min_len} excluded", out.excluded.len());
    }
    if out.users.is_empty() {
        return Err(CorpusError::NoTrainableUsers { min_len });
    }
    Ok(out)
}

/// (train, val, test) sizes for `n` interactions: validation and test get
/// `floor(n / 10)` each and training takes the rest.
pub fn explanation_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

pub fn split_explanation(rs: &ReviewSet, seed: u64) -> Result<ExplanationSplit, CorpusError> {
    if rs.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut order: Vec<usize> = (0..rs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = explanation_sizes(order.len());
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(ExplanationSplit { train, val, test })
}

#[derive(Debug, Serialize, Deserialize)]
pub(super) struct TaggedRecord {
    #[serde(flatten)]
    pub record: ReviewRecord,
    pub split: SplitTag,
}

pub const SEQ_FILE: &str = "seq.jsonl";
pub const EXPL_FILE: &str = "expl.jsonl";

/// Writes `seq.jsonl` (retained users' interactions, chronological) and
/// `expl.jsonl` (every interaction in input order), each tagged with its
/// partition.
pub fn save_splits(dir: &Path, rs: &ReviewSet, splits: &SplitSet) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut seq = Vec::new();
    for u in &splits.seq.users {
        let hist: Vec<_> = rs.user_history(&u.user).collect();
        let n = hist.len();
        for (pos, x) in hist.into_iter().enumerate() {
            let split = match n - pos {
                1 => SplitTag::Test,
                2 => SplitTag::Val,
                _ => SplitTag::Train,
            };
            seq.push(TaggedRecord {
                record: x.record(),
                split,
            });
        }
    }
    write_jsonl(&dir.join(SEQ_FILE), &seq)?;
    let tags = splits.expl.tag_of(rs.len());
    let expl: Vec<TaggedRecord> = rs
        .interactions()
        .iter()
        .zip(tags)
        .map(|(x, split)| TaggedRecord {
            record: x.record(),
            split,
        })
        .collect();
    write_jsonl(&dir.join(EXPL_FILE), &expl)
}

fn read_tagged(path: &Path) -> Result<Vec<TaggedRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::BadSplit {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Inverse of [`save_splits`]: the review set and both split views.
pub fn load_splits(dir: &Path) -> Result<(ReviewSet, SplitSet), CorpusError> {
    let expl_path = dir.join(EXPL_FILE);
    let tagged = read_tagged(&expl_path)?;
    let mut expl = ExplanationSplit::default();
    for (i, t) in tagged.iter().enumerate() {
        match t.split {
            SplitTag::Train => expl.train.push(i),
            SplitTag::Val => expl.val.push(i),
            SplitTag::Test => expl.test.push(i),
        }
    }
    let rs = ReviewSet::from_records(tagged.into_iter().map(|t| t.record));

    let seq_path = dir.join(SEQ_FILE);
    let mut grouped: indexmap::IndexMap<String, Vec<(String, SplitTag)>> = indexmap::IndexMap::new();
    for t in read_tagged(&seq_path)? {
        grouped.entry(t.record.user).or_default().push((t.record.item, t.split));
    }
    let bad = |m: String| CorpusError::BadSplit {
        path: seq_path.clone(),
        message: m,
    };
    let mut seq = SeqSplit::default();
    for (user, items) in grouped {
        let n = items.len();
        if n < 3 || items[n - 1].1 != SplitTag::Test || items[n - 2].1 != SplitTag::Val {
            return Err(bad(format!("user {user} does not end with val, test")));
        }
        if items[..n - 2].iter().any(|(_, s)| *s != SplitTag::Train) {
            return Err(bad(format!("user {user} has held-out items before the end")));
        }
        seq.users.push(UserSequence {
            user,
            train: items[..n - 2].iter().map(|(i, _)| i.clone()).collect(),
            val: items[n - 2].0.clone(),
            test: items[n - 1].0.clone(),
        });
    }
    let kept: std::collections::HashSet<&str> = seq.users.iter().map(|u| u.user.as_str()).collect();
    seq.excluded = rs.users().filter(|u| !kept.contains(u)).map(str::to_string).collect();
    Ok((rs, SplitSet { seq, expl }))
}
