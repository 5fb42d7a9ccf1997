//! Task-tagged training pairs.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{EntityIndex, Interaction};
use crate::distiller::Quadruplet;
use crate::task::Task;
use crate::textcodec::{encode_rendered, encode_target, item_surface, render_task_input, TaskInput, TokenSequence, Vocab};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub task: Task,
    pub input: TokenSequence,
    /// EOS-terminated.
    pub target: Vec<u32>,
}

impl TrainingSample {
    pub fn example(&self) -> crate::model::Example<'_> {
        crate::model::Example {
            task: self.task,
            input: &self.input,
            target: &self.target,
        }
    }
}

/// Longest SR input history; older items are dropped.
pub const MAX_HISTORY: usize = 20;

/// Renders and encodes samples against one vocabulary and entity numbering.
#[derive(Debug, Clone, Copy)]
pub struct SampleBuilder<'a> {
    pub vocab: &'a Vocab,
    pub entities: &'a EntityIndex,
}

impl<'a> SampleBuilder<'a> {
    pub fn new(vocab: &'a Vocab, entities: &'a EntityIndex) -> Self {
        Self { vocab, entities }
    }

    pub fn encode_input(&self, input: &TaskInput) -> Result<TokenSequence, TrainError> {
        Ok(encode_rendered(&render_task_input(input), self.vocab)?)
    }

    /// Target ids of an item's surface form, e.g. `item_7</s>`.
    pub fn item_target(&self, item: u32) -> Vec<u32> {
        encode_target(&item_surface(item), self.vocab)
    }

    fn user_number(&self, user: &str) -> Result<u32, TrainError> {
        self.entities
            .user_number(user)
            .ok_or_else(|| TrainError::UnknownEntity(user.to_string()))
    }

    fn item_number(&self, item: &str) -> Result<u32, TrainError> {
        self.entities
            .item_number(item)
            .ok_or_else(|| TrainError::UnknownEntity(item.to_string()))
    }

    fn sample(&self, input: TaskInput, target: Vec<u32>) -> Result<TrainingSample, TrainError> {
        Ok(TrainingSample {
            task: input.task(),
            input: self.encode_input(&input)?,
            target,
        })
    }

    /// Fixed-input SR pair: the last `MAX_HISTORY` items of `history`
    /// predict `next`.
    pub fn sr_pair(&self, user: u32, history: &[u32], next: u32) -> Result<TrainingSample, TrainError> {
        let recent = &history[history.len().saturating_sub(MAX_HISTORY)..];
        self.sample(
            TaskInput::Sequential {
                user,
                history: recent.to_vec(),
            },
            self.item_target(next),
        )
    }

    /// A contiguous segment `[a_j..=a_k]` with `k - j >= 1`, uniform over
    /// all such pairs; `a_j..a_{k-1}` is the input history and `a_k` the
    /// target.
    pub fn make_sr_sample(&self, user: u32, history: &[u32], rng: &mut impl Rng) -> Result<TrainingSample, TrainError> {
        let n = history.len();
        if n < 2 {
            return Err(TrainError::HistoryTooShort(n));
        }
        let (j, k) = segment_from_index(rng.random_range(0..n * (n - 1) / 2), n);
        self.sr_pair(user, &history[j..k], history[k])
    }

    pub fn tr_candidates(
        positive: u32,
        interacted: &HashSet<u32>,
        universe: &[u32],
        n_negatives: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<u32>, TrainError> {
        let pool: Vec<u32> = universe.iter().copied().filter(|i| !interacted.contains(i) && *i != positive).collect();
        if pool.len() < n_negatives {
            return Err(TrainError::InsufficientUniverse {
                needed: n_negatives,
                available: pool.len(),
            });
        }
        let mut candidates: Vec<u32> = pool.choose_multiple(rng, n_negatives).copied().collect();
        candidates.push(positive);
        candidates.shuffle(rng);
        Ok(candidates)
    }

    /// `n_negatives` items the user never interacted with, drawn without
    /// replacement, shuffled together with the positive.
    pub fn make_tr_sample(
        &self,
        user: u32,
        positive: u32,
        interacted: &HashSet<u32>,
        universe: &[u32],
        n_negatives: usize,
        rng: &mut impl Rng,
    ) -> Result<TrainingSample, TrainError> {
        let candidates = Self::tr_candidates(positive, interacted, universe, n_negatives, rng)?;
        self.sample(TaskInput::TopN { user, candidates }, self.item_target(positive))
    }

    pub fn make_rationale_samples(&self, q: &Quadruplet) -> Result<[TrainingSample; 2], TrainError> {
        let user = self.user_number(&q.user)?;
        let item = self.item_number(&q.item)?;
        Ok([
            self.sample(TaskInput::Preference { user }, encode_target(&q.preference, self.vocab))?,
            self.sample(TaskInput::Attribute { item }, encode_target(&q.attribute, self.vocab))?,
        ])
    }

    /// None for an interaction without review text.
    pub fn make_eg_sample(&self, x: &Interaction) -> Result<Option<TrainingSample>, TrainError> {
        if !x.has_review() {
            return Ok(None);
        }
        let user = self.user_number(&x.user_id)?;
        let item = self.item_number(&x.item_id)?;
        self.sample(
            TaskInput::Explanation { user, item },
            encode_target(&x.review_text, self.vocab),
        )
        .map(Some)
    }
}

/// Maps `0..n(n-1)/2` onto the pairs `(j, k)`, `0 <= j < k < n`.
pub fn segment_from_index(mut idx: usize, n: usize) -> (usize, usize) {
    for j in 0..n - 1 {
        let row = n - 1 - j;
        if idx < row {
            return (j, j + 1 + idx);
        }
        idx -= row;
    }
    unreachable!("segment index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ReviewRecord, ReviewSet};
    use crate::textcodec::{decode, normalize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocab, EntityIndex) {
        let rs = ReviewSet::from_records((0..3).map(|i| ReviewRecord {
            user: "U".into(),
            item: format!("I{i}"),
            text: "nice".into(),
            ts: i,
        }));
        let vocab = Vocab::build(
            &["predict the next item for user_1 after item_2", "pick the best from", "the user prefers games with engaging storylines."],
            256,
        )
        .unwrap();
        (vocab, EntityIndex::from_reviews(&rs))
    }

    #[test]
    fn segment_enumeration_is_a_bijection() {
        for n in 2..7 {
            let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|i| segment_from_index(i, n)).collect();
            let set: HashSet<_> = pairs.iter().copied().collect();
            assert_eq!(set.len(), pairs.len());
            assert!(pairs.iter().all(|&(j, k)| j < k && k < n));
        }
    }

    #[test]
    fn two_item_history_is_forced() {
        let (v, e) = setup();
        let b = SampleBuilder::new(&v, &e);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.make_sr_sample(1, &[4, 9], &mut rng).unwrap();
        assert_eq!(s, b.sr_pair(1, &[4], 9).unwrap());
        assert!(matches!(b.make_sr_sample(1, &[4], &mut rng), Err(TrainError::HistoryTooShort(1))));
    }

    #[test]
    fn tr_candidates_respect_interactions() {
        let universe: Vec<u32> = (1..=30).collect();
        let interacted: HashSet<u32> = [1, 2, 3].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = SampleBuilder::tr_candidates(2, &interacted, &universe, 19, &mut rng).unwrap();
            assert_eq!(c.len(), 20);
            assert!(c.contains(&2));
            assert!(c.iter().filter(|&&i| i != 2).all(|i| !interacted.contains(i)));
            assert_eq!(c.iter().collect::<HashSet<_>>().len(), 20);
        }
        assert!(matches!(
            SampleBuilder::tr_candidates(2, &interacted, &universe, 28, &mut rng),
            Err(TrainError::InsufficientUniverse { needed: 28, available: 27 })
        ));
    }

    #[test]
    fn rationale_targets_round_trip() {
        let (v, e) = setup();
        let b = SampleBuilder::new(&v, &e);
        let q = Quadruplet {
            user: "U".into(),
            item: "I1".into(),
            preference: "The user prefers games with engaging storylines.".into(),
            attribute: "The item's attributes: none.".into(),
            flags: Default::default(),
        };
        let [pref, attr] = b.make_rationale_samples(&q).unwrap();
        assert_eq!(pref.task, Task::Preference);
        assert_eq!(attr.task, Task::Attribute);
        assert_eq!(decode(&pref.target, &v), normalize(&q.preference));
    }

    #[test]
    fn empty_review_has_no_eg_sample() {
        let (v, e) = setup();
        let b = SampleBuilder::new(&v, &e);
        let x = Interaction {
            user_id: "U".into(),
            item_id: "I0".into(),
            review_text: " ".into(),
            ts: 0,
            order_index: 0,
        };
        assert!(b.make_eg_sample(&x).unwrap().is_none());
    }
}
