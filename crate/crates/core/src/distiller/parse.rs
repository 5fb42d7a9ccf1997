//! Turning a free-form LLM response into a (preference, attribute) pair.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::DistillError;

/// Reviews with at most this many whitespace tokens are flagged: the model
/// tends to invent details when there is little to summarise.
pub const SHORT_REVIEW_MAX_TOKENS: usize = 5;

const PREFERENCE_PREFIX: &str = "the user prefers";
const ATTRIBUTE_PREFIX: &str = "the item's attributes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    ShortReview,
    ParseFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub preference: String,
    pub attribute: String,
    pub flags: BTreeSet<Flag>,
}

pub fn review_len_tokens(review: &str) -> usize {
    review.split_whitespace().count()
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits after every run of `.`, `!` or `?` that is followed by whitespace
/// or the end of the text. A trailing fragment is kept as is.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        cur.push(c);
        if is_terminal(c) {
            while i + 1 < chars.len() && is_terminal(chars[i + 1]) {
                i += 1;
                cur.push(chars[i]);
            }
            if i + 1 == chars.len() || chars[i + 1].is_whitespace() {
                out.push(std::mem::take(&mut cur));
            }
        }
        i += 1;
    }
    out.push(cur);
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Drops bullets, enumerators and wrapping quotes; appends a full stop to an
/// unterminated fragment. Returns None for text without letters.
fn clean_sentence(s: &str) -> Option<String> {
    let mut s = s.replace('\u{2019}', "'");
    loop {
        let t = s.trim_start();
        let stripped = t
            .strip_prefix("- ")
            .or_else(|| t.strip_prefix("* "))
            .or_else(|| t.strip_prefix('\u{2022}'))
            .or_else(|| t.strip_prefix('"'))
            .or_else(|| {
                let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
                if digits > 0 {
                    t[digits..].strip_prefix(')').or_else(|| t[digits..].strip_prefix(". "))
                } else {
                    None
                }
            });
        match stripped {
            Some(rest) => s = rest.to_string(),
            None => break,
        }
    }
    let mut s = s.trim().trim_end_matches('"').trim().to_string();
    if !s.chars().any(char::is_alphabetic) {
        return None;
    }
    if !s.ends_with(is_terminal) {
        s.push('.');
    }
    Some(s)
}

fn starts_with_ci(s: &str, prefix: &str) -> bool {
    s.len() >= prefix.len() && s.is_char_boundary(prefix.len()) && s[..prefix.len()].eq_ignore_ascii_case(prefix)
}

pub fn parse_rationale(response: &str, review_len_tokens: usize) -> Result<Rationale, DistillError> {
    let sentences: Vec<String> = split_sentences(response).iter().filter_map(|s| clean_sentence(s)).collect();
    let mut flags = BTreeSet::new();
    if review_len_tokens <= SHORT_REVIEW_MAX_TOKENS {
        flags.insert(Flag::ShortReview);
    }
    let pref = sentences.iter().find(|s| starts_with_ci(s, PREFERENCE_PREFIX));
    let attr = sentences.iter().find(|s| starts_with_ci(s, ATTRIBUTE_PREFIX));
    let (preference, attribute) = match (pref, attr) {
        (Some(p), Some(a)) => (p.clone(), a.clone()),
        _ if sentences.len() >= 2 => {
            flags.insert(Flag::ParseFallback);
            (sentences[0].clone(), sentences[1].clone())
        }
        _ => {
            return Err(DistillError::Unparseable(format!(
                "{} usable sentence(s) in response",
                sentences.len()
            )))
        }
    };
    Ok(Rationale {
        preference,
        attribute,
        flags,
    })
}
