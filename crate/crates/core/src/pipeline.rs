//! Stage wiring shared by the CLI and the end-to-end tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, EvalSection, RunConfig};
use crate::corpus::{split_explanation, split_leave_one_out, CorpusError, EntityIndex, ReviewSet, SplitSet};
use crate::distiller::{DistillError, Quadruplet};
use crate::evaluator::{evaluate, EvalError, MetricReport, TestLabel};
use crate::inference::{InferenceError, RankedList, Recommender};
use crate::model::{ModelError, Seq2Seq};
use crate::textcodec::{CodecError, Vocab};
use crate::trainer::{candidate_rng, train, vocab_corpus, SampleBuilder, TrainData, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("distiller: {0}")]
    Distill(#[from] DistillError),
    #[error("textcodec: {0}")]
    Codec(#[from] CodecError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("trainer: {0}")]
    Train(#[from] TrainError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("evaluator: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl PipelineError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Configuration problems exit with 2, everything else with 1.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Seq,
    Topn,
}

impl EvalTask {
    pub const ALL: [EvalTask; 2] = [EvalTask::Seq, EvalTask::Topn];
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalTask::Seq => "seq",
            EvalTask::Topn => "topn",
        })
    }
}

impl FromStr for EvalTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seq" => Ok(EvalTask::Seq),
            "topn" => Ok(EvalTask::Topn),
            _ => Err(format!("unknown task '{s}', expected seq or topn")),
        }
    }
}

/// Everything training and evaluation read, derived from one review set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub reviews: ReviewSet,
    pub splits: SplitSet,
    pub quads: Vec<Quadruplet>,
    pub entities: EntityIndex,
    pub vocab: Vocab,
}

pub fn make_splits(rs: &ReviewSet, cfg: &RunConfig) -> Result<SplitSet, PipelineError> {
    Ok(SplitSet {
        seq: split_leave_one_out(rs, cfg.data.min_len)?,
        expl: split_explanation(rs, cfg.data.split_seed)?,
    })
}

/// Vocabulary from training-side text only.
pub fn build_vocab(rs: &ReviewSet, splits: &SplitSet, quads: &[Quadruplet], cap: usize) -> Result<Vocab, PipelineError> {
    Ok(Vocab::build(&vocab_corpus(rs, splits, quads), cap)?)
}

impl Prepared {
    pub fn new(reviews: ReviewSet, splits: SplitSet, quads: Vec<Quadruplet>, vocab: Vocab) -> Self {
        let entities = EntityIndex::from_reviews(&reviews);
        Self {
            reviews,
            splits,
            quads,
            entities,
            vocab,
        }
    }

    /// Splits and vocabulary computed from scratch.
    pub fn build(reviews: ReviewSet, quads: Vec<Quadruplet>, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let splits = make_splits(&reviews, cfg)?;
        let vocab = build_vocab(&reviews, &splits, &quads, cfg.data.vocab_cap)?;
        Ok(Self::new(reviews, splits, quads, vocab))
    }

    pub fn train_data(&self, cfg: &RunConfig, seed: u64) -> Result<TrainData, PipelineError> {
        Ok(TrainData::build(
            &self.reviews,
            &self.splits,
            &self.quads,
            &self.entities,
            &self.vocab,
            &cfg.trainer_config(seed),
        )?)
    }

    pub fn train(&self, cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrainOutcome, PipelineError> {
        let data = self.train_data(cfg, seed)?;
        Ok(train(
            &data,
            &self.vocab,
            &self.entities,
            cfg.model.with_vocab(self.vocab.len()),
            &cfg.trainer_config(seed),
            out_dir,
        )?)
    }

    pub fn test_labels(&self) -> Vec<TestLabel> {
        self.splits
            .seq
            .users
            .iter()
            .map(|u| TestLabel {
                user: u.user.clone(),
                positive: Some(u.test.clone()),
            })
            .collect()
    }

    pub fn recommender<'a>(&'a self, model: &'a Seq2Seq<f32>, cfg: &RunConfig) -> Recommender<'a> {
        let mut r = Recommender::new(model, &self.vocab, &self.entities, cfg.beam.clone());
        r.topn_candidates = Some(cfg.eval.n_negatives + 1);
        r.strict = cfg.eval.strict_candidates;
        r
    }

    /// Test-time candidates: the held-out positive plus `n` items the user
    /// never touched, drawn from a seed independent of training.
    pub fn test_candidates(&self, user: &str, positive: &str, n: usize, seed: u64) -> Result<Vec<String>, PipelineError> {
        let num = |s: &str| {
            self.entities
                .item_number(s)
                .ok_or_else(|| TrainError::UnknownEntity(s.to_string()))
        };
        let u = self
            .entities
            .user_number(user)
            .ok_or_else(|| TrainError::UnknownEntity(user.to_string()))?;
        let pos = num(positive)?;
        let interacted = self
            .reviews
            .user_items(user)
            .into_iter()
            .map(num)
            .collect::<Result<_, _>>()?;
        let universe: Vec<u32> = self.entities.item_numbers().collect();
        let mut rng = candidate_rng(seed ^ 0x7e57, u, pos);
        let nums = SampleBuilder::tr_candidates(pos, &interacted, &universe, n, &mut rng)?;
        Ok(nums
            .into_iter()
            .map(|i| self.entities.item_id(i).expect("numbered item").to_string())
            .collect())
    }

    /// Ranked lists for every user with a test label, in split order.
    pub fn rank_test(
        &self,
        rec: &Recommender<'_>,
        task: EvalTask,
        eval: &EvalSection,
    ) -> Result<Vec<UserRanking>, PipelineError> {
        let universe = match (task, eval.sr_sampled) {
            (EvalTask::Seq, None) => Some(rec.universe_trie()?),
            _ => None,
        };
        let mut out = Vec::with_capacity(self.splits.seq.users.len());
        for u in &self.splits.seq.users {
            let list = match task {
                EvalTask::Seq => {
                    let mut history: Vec<&str> = u.train.iter().map(String::as_str).collect();
                    history.push(&u.val);
                    match &universe {
                        Some(trie) => rec.recommend_sequential(&u.user, &history, trie)?,
                        None => {
                            let n = eval.sr_sampled.expect("sampled branch");
                            let cands = self.test_candidates(&u.user, &u.test, n, eval.seed)?;
                            let refs: Vec<&str> = cands.iter().map(String::as_str).collect();
                            rec.recommend_sequential(&u.user, &history, &rec.item_trie(&refs)?)?
                        }
                    }
                }
                EvalTask::Topn => {
                    let cands = self.test_candidates(&u.user, &u.test, eval.n_negatives, eval.seed)?;
                    let refs: Vec<&str> = cands.iter().map(String::as_str).collect();
                    rec.recommend_topn(&u.user, &refs)?
                }
            };
            out.push(UserRanking {
                user: u.user.clone(),
                items: list.items,
                scores: list.scores,
            });
        }
        Ok(out)
    }

    pub fn evaluate(&self, rankings: &[UserRanking], ks: &[usize]) -> Result<MetricReport, PipelineError> {
        let map: HashMap<String, RankedList> = rankings
            .iter()
            .map(|r| {
                (
                    r.user.clone(),
                    RankedList {
                        items: r.items.clone(),
                        scores: r.scores.clone(),
                    },
                )
            })
            .collect();
        Ok(evaluate(&map, &self.test_labels(), ks)?)
    }
}

/// One line of a ranked-list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRanking {
    pub user: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn write_rankings(path: &Path, rankings: &[UserRanking]) -> Result<(), PipelineError> {
    Ok(crate::corpus::write_jsonl(path, rankings)?)
}

pub fn read_rankings(path: &Path) -> Result<Vec<UserRanking>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(PipelineError::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Git-style blob hash, with SHA-256: `sha256("blob <len>\0" + bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Effective config, seed and input hashes of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Path to content hash; directories hash each file inside.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), PipelineError> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(PipelineError::io(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                self.add_input(&p)?;
            }
            return Ok(());
        }
        let bytes = std::fs::read(path).map_err(PipelineError::io(path))?;
        self.inputs.insert(path.display().to_string(), content_hash(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        let path = dir.join(format!("manifest.{}.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Per-trial result of a full train-and-evaluate run.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub reports: BTreeMap<EvalTask, MetricReport>,
    pub rankings: BTreeMap<EvalTask, Vec<UserRanking>>,
}

/// Trains with `seed` into `out_dir`, then ranks and scores both tasks.
pub fn run_trial(p: &Prepared, cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrialRun, PipelineError> {
    let outcome = p.train(cfg, seed, out_dir)?;
    let rec = p.recommender(&outcome.model, cfg);
    let mut reports = BTreeMap::new();
    let mut rankings = BTreeMap::new();
    for task in EvalTask::ALL {
        let r = p.rank_test(&rec, task, &cfg.eval)?;
        reports.insert(task, p.evaluate(&r, &cfg.eval.ks)?);
        rankings.insert(task, r);
    }
    Ok(TrialRun {
        seed,
        outcome,
        reports,
        rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash() {
        // sha256 of "blob 0\0".
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn eval_task_round_trip() {
        for t in EvalTask::ALL {
            assert_eq!(t.to_string().parse::<EvalTask>().unwrap(), t);
        }
        assert!("sr".parse::<EvalTask>().is_err());
    }
}
