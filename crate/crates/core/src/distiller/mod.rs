//! Rationale distillation: prompt an LLM with each review and keep the
//! preference and attribute sentences it returns.

mod backend;
mod cache;
mod parse;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Interaction, ReviewSet};

pub use backend::{content_words, fnv1a, Backend, BackendError, HttpBackend, MockBackend, API_KEY_ENV};
pub use cache::ResponseCache;
pub use parse::{parse_rationale, review_len_tokens, split_sentences, Flag, Rationale, SHORT_REVIEW_MAX_TOKENS};

const PROMPT_HEAD: &str = "A user bought an item and said '";
const PROMPT_TAIL: &str =
    "'. Use two sentences to explain the user's preference and the item's attributes, respectively.";

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("EMPTY_REVIEW: review is empty after trimming")]
    EmptyReview,
    #[error("UNPARSEABLE: {0}")]
    Unparseable(String),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillPrompt {
    pub text: String,
}

pub fn build_prompt(review: &str) -> Result<DistillPrompt, DistillError> {
    if review.trim().is_empty() {
        return Err(DistillError::EmptyReview);
    }
    Ok(DistillPrompt {
        text: format!("{PROMPT_HEAD}{review}{PROMPT_TAIL}"),
    })
}

/// The review slot of a prompt built by [`build_prompt`].
pub fn review_from_prompt(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(PROMPT_HEAD)?.strip_suffix(PROMPT_TAIL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
    pub max_tokens: u32,
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            max_concurrency: 4,
            max_tokens: 128,
            cache_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.max_concurrency == 0 {
            return Err(DistillError::Config("max_concurrency must be at least 1".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return Err(DistillError::Config("http backend requires an endpoint".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(DistillError::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    /// The configured backend.
    pub fn connect(&self) -> Result<Box<dyn Backend>, DistillError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Box::new(MockBackend::new()),
            BackendKind::Http => Box::new(HttpBackend::new(self)?),
        })
    }
}

/// One line of the quadruplet output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub user: String,
    pub item: String,
    pub preference: String,
    pub attribute: String,
    pub flags: BTreeSet<Flag>,
}

impl Quadruplet {
    pub fn new(x: &Interaction, r: Rationale) -> Self {
        Self {
            user: x.user_id.clone(),
            item: x.item_id.clone(),
            preference: r.preference,
            attribute: r.attribute,
            flags: r.flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub user: String,
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DistillSummary {
    pub total: usize,
    pub ok: usize,
    /// Empty reviews and unparseable responses.
    pub skipped: usize,
    /// Backend failures after retries.
    pub failed: usize,
    pub fallback: usize,
    pub short_review: usize,
    pub cache_hits: usize,
    pub backend_calls: usize,
}

impl DistillSummary {
    /// More than half of the backend requests failed.
    pub fn mostly_failed(&self) -> bool {
        let attempted = self.backend_calls + self.cache_hits;
        attempted > 0 && 2 * self.failed > attempted
    }
}

#[derive(Debug, Clone, Default)]
pub struct DistillOutcome {
    /// In input order of the review set.
    pub quads: Vec<Quadruplet>,
    pub skips: Vec<Skip>,
    pub summary: DistillSummary,
}

enum Outcome {
    Quad(Quadruplet),
    Skipped(String),
    Failed(String),
}

struct Counters {
    cache_hits: AtomicUsize,
    backend_calls: AtomicUsize,
}

fn distill_one(
    x: &Interaction,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    counters: &Counters,
) -> Outcome {
    let prompt = match build_prompt(&x.review_text) {
        Ok(p) => p,
        Err(e) => return Outcome::Skipped(e.to_string()),
    };
    let cached = cache.and_then(|c| c.get(&prompt.text));
    let response = match cached {
        Some(r) => {
            counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            r
        }
        None => {
            counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            match backend.complete(&prompt.text) {
                Ok(r) => {
                    if let Some(c) = cache {
                        if let Err(e) = c.put(&prompt.text, &r) {
                            log::warn!("could not cache response: {e}");
                        }
                    }
                    r
                }
                Err(e) => return Outcome::Failed(e.to_string()),
            }
        }
    };
    match parse_rationale(&response, review_len_tokens(&x.review_text)) {
        Ok(r) => Outcome::Quad(Quadruplet::new(x, r)),
        Err(e) => Outcome::Skipped(e.to_string()),
    }
}

/// Distils every interaction with up to `concurrency` requests in flight.
/// The cache is consulted before the backend and filled after each call.
pub fn distill(
    rs: &ReviewSet,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    concurrency: usize,
) -> DistillOutcome {
    let xs = rs.interactions();
    let counters = Counters {
        cache_hits: AtomicUsize::new(0),
        backend_calls: AtomicUsize::new(0),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..xs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..concurrency.max(1).min(xs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= xs.len() {
                    break;
                }
                let out = distill_one(&xs[i], backend, cache, &counters);
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });

    let mut outcome = DistillOutcome::default();
    let summary = &mut outcome.summary;
    summary.total = xs.len();
    summary.cache_hits = counters.cache_hits.into_inner();
    summary.backend_calls = counters.backend_calls.into_inner();
    for (x, r) in xs.iter().zip(results.into_inner().expect("no poisoned workers")) {
        let skip = |reason: String| Skip {
            user: x.user_id.clone(),
            item: x.item_id.clone(),
            reason,
        };
        match r.expect("every index processed") {
            Outcome::Quad(q) => {
                summary.ok += 1;
                summary.fallback += q.flags.contains(&Flag::ParseFallback) as usize;
                summary.short_review += q.flags.contains(&Flag::ShortReview) as usize;
                outcome.quads.push(q);
            }
            Outcome::Skipped(reason) => {
                log::warn!("skipping ({}, {}): {reason}", x.user_id, x.item_id);
                summary.skipped += 1;
                outcome.skips.push(skip(reason));
            }
            Outcome::Failed(reason) => {
                log::warn!("backend failed for ({}, {}): {reason}", x.user_id, x.item_id);
                summary.failed += 1;
                outcome.skips.push(skip(format!("FAILED: {reason}")));
            }
        }
    }
    outcome
}

pub fn write_quads(path: &Path, quads: &[Quadruplet]) -> Result<(), crate::corpus::CorpusError> {
    crate::corpus::write_jsonl(path, quads)
}

pub fn read_quads(path: &Path) -> Result<Vec<Quadruplet>, crate::corpus::CorpusError> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| crate::corpus::CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| crate::corpus::CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| crate::corpus::CorpusError::Malformed {
                line: n + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReviewRecord;

    fn reviews(texts: &[&str]) -> ReviewSet {
        ReviewSet::from_records(texts.iter().enumerate().map(|(i, t)| ReviewRecord {
            user: format!("u{}", i % 2),
            item: format!("i{i}"),
            text: t.to_string(),
            ts: i as i64,
        }))
    }

    #[test]
    fn prompt_template() {
        let p = build_prompt("This is a fantastic game.").unwrap();
        assert_eq!(
            p.text,
            "A user bought an item and said 'This is a fantastic game.'. Use two sentences to explain the user's \
             preference and the item's attributes, respectively."
        );
        assert!(matches!(build_prompt("  "), Err(DistillError::EmptyReview)));
        let p = build_prompt("it's the user's favourite").unwrap();
        assert_eq!(review_from_prompt(&p.text), Some("it's the user's favourite"));
    }

    #[test]
    fn mock_distillation_is_deterministic_and_cached() {
        let rs = reviews(&["Great sturdy tent.", "Soft and warm blanket here", "Noisy fan but cheap"]);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mock = MockBackend::new();
        let a = distill(&rs, &mock, Some(&cache), 2);
        assert_eq!(a.quads.len(), 3);
        assert_eq!(mock.calls(), 3);
        let b = distill(&rs, &mock, Some(&cache), 3);
        assert_eq!(mock.calls(), 3, "warm cache must not reach the backend");
        assert_eq!(b.summary.cache_hits, 3);
        assert_eq!(a.quads, b.quads);
    }

    struct Canned;
    impl Backend for Canned {
        fn complete(&self, prompt: &str) -> Result<String, BackendError> {
            if prompt.contains("broken") {
                Ok("Good. ".into())
            } else if prompt.contains("offline") {
                Err(BackendError::Status(503))
            } else {
                Ok(MockBackend::respond(prompt))
            }
        }
    }

    #[test]
    fn unparseable_and_failed_items_are_skipped() {
        let rs = reviews(&["lovely teapot", "broken output", "sharp knife set", "", "offline"]);
        let out = distill(&rs, &Canned, None, 1);
        assert_eq!(out.quads.len(), 2);
        assert_eq!(out.summary.skipped, 2);
        assert_eq!(out.summary.failed, 1);
        assert!(!out.summary.mostly_failed());
        let items: Vec<&str> = out.quads.iter().map(|q| q.item.as_str()).collect();
        assert_eq!(items, ["i0", "i2"]);
    }

    #[test]
    fn majority_failure_is_reported() {
        let rs = reviews(&["offline", "offline again", "fine review text"]);
        let out = distill(&rs, &Canned, None, 2);
        assert_eq!(out.summary.failed, 2);
        assert!(out.summary.mostly_failed());
    }

    #[test]
    fn quad_json_shape() {
        let q = Quadruplet {
            user: "u".into(),
            item: "i".into(),
            preference: "The user prefers x.".into(),
            attribute: "The item's attributes y.".into(),
            flags: BTreeSet::from([Flag::ShortReview]),
        };
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(
            s,
            r#"{"user":"u","item":"i","preference":"The user prefers x.","attribute":"The item's attributes y.","flags":["SHORT_REVIEW"]}"#
        );
    }
}
