//! LLM backends: a deterministic mock and a JSON-over-HTTP client.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{review_from_prompt, BackendConfig, DistillError};

pub const API_KEY_ENV: &str = "RDREC_LLM_API_KEY";

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned status {0}")]
    Status(u16),
    #[error("bad response body: {0}")]
    Body(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status(s) => *s == 429 || *s >= 500,
            BackendError::Body(_) => false,
        }
    }
}

/// Turns a rendered prompt into response text. Implementations must be
/// callable from several threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "all", "also", "and", "any", "are", "but", "can", "did", "does", "for", "from", "had",
    "has", "have", "her", "him", "his", "how", "its", "just", "more", "most", "not", "now", "off", "one", "only",
    "our", "out", "over", "she", "should", "some", "such", "than", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "too", "very", "was", "were", "what", "when", "which", "while", "who", "why",
    "will", "with", "would", "you", "your",
];

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercase alphabetic words of length >= 3 that are not stopwords, first
/// occurrence order.
pub fn content_words(review: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    review
        .split(|c: char| !c.is_alphabetic())
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

/// Offline stand-in for the LLM.
///
/// Content words of the embedded review are ranked by
/// `fnv1a(prompt ++ "\0" ++ word)` (ties by the word itself) and the first
/// three fill the response, repeating cyclically when fewer exist. A review
/// without content words yields "unspecified".
#[derive(Debug, Default)]
pub struct MockBackend {
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn respond(prompt: &str) -> String {
        let review = review_from_prompt(prompt).unwrap_or(prompt);
        let mut words = content_words(review);
        words.sort_by_cached_key(|w| {
            let mut key = prompt.as_bytes().to_vec();
            key.push(0);
            key.extend_from_slice(w.as_bytes());
            (fnv1a(&key), w.clone())
        });
        let pick = |i: usize| -> &str {
            if words.is_empty() {
                "unspecified"
            } else {
                &words[i % words.len()]
            }
        };
        format!(
            "The user prefers items featuring {} and {}. The item's attributes include {} qualities.",
            pick(0),
            pick(1),
            pick(2)
        )
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Self::respond(prompt))
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// POSTs `{"prompt", "max_tokens"}` and reads `{"text"}`, retrying transport
/// errors, 429 and 5xx with exponential backoff.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    max_tokens: u32,
    max_retries: u32,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, DistillError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| DistillError::Config("http backend requires an endpoint".into()))?;
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| DistillError::Config(format!("http backend requires {API_KEY_ENV} to be set")))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            agent,
            endpoint,
            api_key,
            max_tokens: cfg.max_tokens,
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let body = HttpRequest {
            prompt,
            max_tokens: self.max_tokens,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        let parsed: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Body(e.to_string()))?;
        Ok(parsed.text)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if e.retryable() && attempt < self.max_retries => {
                    let wait = self.backoff * 2u32.saturating_pow(attempt);
                    log::debug!("backend attempt {} failed ({e}); retrying in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distiller::build_prompt;

    #[test]
    fn mock_is_deterministic_and_review_sensitive() {
        let a = build_prompt("strategic card game fun").unwrap();
        let b = build_prompt("soft warm wool blanket").unwrap();
        assert_eq!(MockBackend::respond(&a.text), MockBackend::respond(&a.text));
        assert_ne!(MockBackend::respond(&a.text), MockBackend::respond(&b.text));
    }

    #[test]
    fn mock_only_uses_review_words() {
        let p = build_prompt("strategic card game fun").unwrap();
        let out = MockBackend::respond(&p.text);
        let fill: Vec<&str> = out
            .trim_start_matches("The user prefers items featuring ")
            .split(|c: char| !c.is_alphabetic())
            .filter(|w| !w.is_empty())
            .filter(|w| !["and", "The", "item", "s", "attributes", "include", "qualities"].contains(w))
            .collect();
        assert_eq!(fill.len(), 3);
        for w in fill {
            assert!(["strategic", "card", "game", "fun"].contains(&w), "{w}");
        }
    }

    #[test]
    fn mock_handles_reviews_without_content_words() {
        let p = build_prompt("ok it is").unwrap();
        assert!(MockBackend::respond(&p.text).contains("featuring unspecified and unspecified"));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn content_words_filter() {
        assert_eq!(content_words("The game, the GAME and a fun one!"), vec!["game", "fun"]);
    }
}
