//! Beam search, item-constrained decoding and ranked lists.

mod trie;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntityIndex;
use crate::model::{log_softmax, ModelError, Scalar, Seq2Seq, Tape};
use crate::task::Task;
use crate::textcodec::{EOS, PAD};
use crate::textcodec::{decode, encode_target, item_surface, CodecError, TaskInput, TokenSequence, Vocab};
use crate::trainer::SampleBuilder;

pub use trie::{PrefixTrie, TrieError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("beam config: {0}")]
    Config(String),
    #[error("empty item universe")]
    EmptyUniverse,
    #[error("empty history")]
    EmptyHistory,
    #[error("expected {expected} candidates, got {got}")]
    CandidateCount { expected: usize, got: usize },
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<crate::trainer::TrainError> for InferenceError {
    fn from(e: crate::trainer::TrainError) -> Self {
        use crate::trainer::TrainError as T;
        match e {
            T::UnknownEntity(s) => Self::UnknownEntity(s),
            T::Codec(c) => Self::Codec(c),
            T::Model(m) => Self::Model(m),
            other => Self::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    #[serde(rename = "beam_width", alias = "width")]
    pub width: usize,
    /// Generated tokens, EOS included.
    pub max_len: usize,
    /// `score / len^alpha` when nonzero.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 20,
            max_len: 64,
            length_penalty: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.width == 0 {
            return Err(("width".into(), "must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(("max_len".into(), "must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(("length_penalty".into(), "must be a finite non-negative number".into()));
        }
        Ok(())
    }

    fn check(&self) -> Result<(), InferenceError> {
        self.validate().map_err(|(k, m)| InferenceError::Config(format!("{k}: {m}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with EOS when finished.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    /// Ranking score (equals `log_prob` without a length penalty).
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis finished within `max_len`; `hypotheses` are partials.
    pub partial: bool,
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn penalised(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

struct Live {
    hyp: Hypothesis,
    node: usize,
}

fn search<T: Scalar>(
    model: &Seq2Seq<T>,
    input: &TokenSequence,
    task: Task,
    cfg: &BeamConfig,
    trie: Option<&PrefixTrie>,
) -> Result<BeamOutput, InferenceError> {
    cfg.check()?;
    let mut tape = Tape::inference(model.params());
    let enc = model.encode(&mut tape, input, task)?;
    let mark = tape.len();
    let vocab_size = model.config().vocab_size;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            score: 0.0,
            finished: false,
        },
        node: 0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let exact_pruning = cfg.length_penalty == 0.0;

    for _ in 0..cfg.max_len {
        let mut expansions: Vec<Live> = Vec::new();
        for beam in &live {
            let mut dec = Vec::with_capacity(beam.hyp.tokens.len() + 1);
            dec.push(PAD);
            dec.extend_from_slice(&beam.hyp.tokens);
            let logits = model.decode(&mut tape, &enc, &dec)?;
            let m = tape.value(logits);
            let last: Vec<T> = m.row(m.rows() - 1).to_vec();
            tape.truncate(mark);
            let lp = log_softmax(&last);
            let mut push = |tok: u32, node: usize| {
                let mut tokens = beam.hyp.tokens.clone();
                tokens.push(tok);
                let log_prob = beam.hyp.log_prob + lp[tok as usize].as_f64();
                let score = penalised(log_prob, tokens.len(), cfg.length_penalty);
                expansions.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        log_prob,
                        score,
                        finished: tok == EOS,
                    },
                    node,
                });
            };
            match trie {
                Some(t) => {
                    for (tok, child) in t.children(beam.node) {
                        push(tok, child);
                    }
                }
                None => {
                    for tok in 0..vocab_size as u32 {
                        if tok != PAD {
                            push(tok, 0);
                        }
                    }
                }
            }
        }
        expansions.sort_by(|a, b| rank(&a.hyp, &b.hyp));
        expansions.truncate(cfg.width);
        live.clear();
        for e in expansions {
            if e.hyp.finished {
                finished.push(e.hyp);
            } else {
                live.push(e);
            }
        }
        finished.sort_by(rank);
        finished.truncate(cfg.width);
        if live.is_empty() {
            break;
        }
        // Log-probabilities only fall as sequences grow, so once the beam of
        // finished hypotheses is full and beats every live one, stop.
        if exact_pruning && finished.len() >= cfg.width {
            let worst = finished.last().map_or(f64::NEG_INFINITY, |h| h.score);
            if live.iter().all(|l| l.hyp.score <= worst) {
                break;
            }
        }
    }

    if finished.is_empty() {
        let mut partials: Vec<Hypothesis> = live.into_iter().map(|l| l.hyp).collect();
        partials.sort_by(rank);
        return Ok(BeamOutput {
            hypotheses: partials,
            partial: true,
        });
    }
    Ok(BeamOutput {
        hypotheses: finished,
        partial: false,
    })
}

/// Unconstrained beam search over the whole vocabulary (PAD excluded).
pub fn beam_search<T: Scalar>(
    model: &Seq2Seq<T>,
    input: &TokenSequence,
    task: Task,
    cfg: &BeamConfig,
) -> Result<BeamOutput, InferenceError> {
    search(model, input, task, cfg, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based rank of `item`.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|i| i == item).map(|p| p + 1)
    }
}

/// Beam search restricted to trie continuations; every hypothesis is a
/// complete item. Scores are full-softmax log-probabilities, so masking only
/// removes competitors.
pub fn constrained_beam_search<T: Scalar>(
    model: &Seq2Seq<T>,
    input: &TokenSequence,
    task: Task,
    cfg: &BeamConfig,
    trie: &PrefixTrie,
) -> Result<RankedList, InferenceError> {
    let mut cfg = cfg.clone();
    cfg.max_len = cfg.max_len.max(trie.depth());
    let out = search(model, input, task, &cfg, Some(trie))?;
    let mut list = RankedList {
        items: Vec::new(),
        scores: Vec::new(),
    };
    for h in out.hypotheses.iter().filter(|h| h.finished) {
        let item = trie.lookup(&h.tokens).expect("finished hypotheses end at a trie leaf");
        list.items.push(item.to_string());
        list.scores.push(h.score);
    }
    Ok(list)
}

/// Teacher-forced log-probability of `target` (EOS-terminated).
pub fn forced_log_prob<T: Scalar>(
    model: &Seq2Seq<T>,
    input: &TokenSequence,
    task: Task,
    target: &[u32],
) -> Result<f64, InferenceError> {
    if target.is_empty() {
        return Err(ModelError::EmptyTarget.into());
    }
    let mut tape = Tape::inference(model.params());
    let enc = model.encode(&mut tape, input, task)?;
    let logits = model.decode(&mut tape, &enc, &Seq2Seq::<T>::shift_right(target))?;
    let m = tape.value(logits);
    Ok(target
        .iter()
        .enumerate()
        .map(|(r, &t)| log_softmax(m.row(r))[t as usize].as_f64())
        .sum())
}

/// Model plus the codec state needed to go from ids to rankings and text.
pub struct Recommender<'a> {
    pub model: &'a Seq2Seq<f32>,
    pub vocab: &'a Vocab,
    pub entities: &'a EntityIndex,
    pub beam: BeamConfig,
    /// Expected TR candidate count; `None` disables the check.
    pub topn_candidates: Option<usize>,
    /// Reject rather than warn on a candidate-count mismatch.
    pub strict: bool,
}

impl<'a> Recommender<'a> {
    pub fn new(model: &'a Seq2Seq<f32>, vocab: &'a Vocab, entities: &'a EntityIndex, beam: BeamConfig) -> Self {
        Self {
            model,
            vocab,
            entities,
            beam,
            topn_candidates: Some(100),
            strict: false,
        }
    }

    fn builder(&self) -> SampleBuilder<'a> {
        SampleBuilder::new(self.vocab, self.entities)
    }

    fn user_number(&self, user: &str) -> Result<u32, InferenceError> {
        self.entities
            .user_number(user)
            .ok_or_else(|| InferenceError::UnknownEntity(user.to_string()))
    }

    fn item_numbers(&self, items: &[&str]) -> Result<Vec<u32>, InferenceError> {
        items
            .iter()
            .map(|i| {
                self.entities
                    .item_number(i)
                    .ok_or_else(|| InferenceError::UnknownEntity(i.to_string()))
            })
            .collect()
    }

    /// Trie over the surface forms of `items`.
    pub fn item_trie(&self, items: &[&str]) -> Result<PrefixTrie, InferenceError> {
        if items.is_empty() {
            return Err(InferenceError::EmptyUniverse);
        }
        let nums = self.item_numbers(items)?;
        let mut entries = Vec::with_capacity(items.len());
        for (id, n) in items.iter().zip(nums) {
            entries.push((id.to_string(), encode_target(&item_surface(n), self.vocab)));
        }
        Ok(PrefixTrie::build(entries)?)
    }

    /// Trie over every known item.
    pub fn universe_trie(&self) -> Result<PrefixTrie, InferenceError> {
        let ids: Vec<&str> = self
            .entities
            .item_numbers()
            .map(|n| self.entities.item_id(n).expect("numbered item"))
            .collect();
        self.item_trie(&ids)
    }

    pub fn sequential_input(&self, user: &str, history: &[&str]) -> Result<TokenSequence, InferenceError> {
        if history.is_empty() {
            return Err(InferenceError::EmptyHistory);
        }
        let user = self.user_number(user)?;
        let history = self.item_numbers(history)?;
        let recent = &history[history.len().saturating_sub(crate::trainer::MAX_HISTORY)..];
        Ok(self.builder().encode_input(&TaskInput::Sequential {
            user,
            history: recent.to_vec(),
        })?)
    }

    pub fn topn_input(&self, user: &str, candidates: &[&str]) -> Result<TokenSequence, InferenceError> {
        let user = self.user_number(user)?;
        let candidates = self.item_numbers(candidates)?;
        Ok(self.builder().encode_input(&TaskInput::TopN { user, candidates })?)
    }

    /// Ranks `universe` (usually [`Self::universe_trie`]) as the next item.
    pub fn recommend_sequential(
        &self,
        user: &str,
        history: &[&str],
        universe: &PrefixTrie,
    ) -> Result<RankedList, InferenceError> {
        let input = self.sequential_input(user, history)?;
        constrained_beam_search(self.model, &input, Task::Sequential, &self.beam, universe)
    }

    pub fn recommend_topn(&self, user: &str, candidates: &[&str]) -> Result<RankedList, InferenceError> {
        if let Some(expected) = self.topn_candidates {
            if candidates.len() != expected {
                if self.strict {
                    return Err(InferenceError::CandidateCount {
                        expected,
                        got: candidates.len(),
                    });
                }
                log::warn!("expected {expected} candidates, got {}", candidates.len());
            }
        }
        let trie = self.item_trie(candidates)?;
        let input = self.topn_input(user, candidates)?;
        constrained_beam_search(self.model, &input, Task::TopN, &self.beam, &trie)
    }

    fn generate(&self, input: TaskInput) -> Result<String, InferenceError> {
        let task = input.task();
        let seq = self.builder().encode_input(&input)?;
        let out = beam_search(self.model, &seq, task, &self.beam)?;
        let best = out.hypotheses.first().map(|h| h.tokens.as_slice()).unwrap_or(&[]);
        Ok(decode(best, self.vocab))
    }

    /// EG text for a (user, item) pair.
    pub fn explain(&self, user: &str, item: &str) -> Result<String, InferenceError> {
        let u = self.user_number(user)?;
        let i = self.item_numbers(&[item])?[0];
        self.generate(TaskInput::Explanation { user: u, item: i })
    }

    pub fn user_preference(&self, user: &str) -> Result<String, InferenceError> {
        let user = self.user_number(user)?;
        self.generate(TaskInput::Preference { user })
    }

    pub fn item_attribute(&self, item: &str) -> Result<String, InferenceError> {
        let item = self.item_numbers(&[item])?[0];
        self.generate(TaskInput::Attribute { item })
    }
}
