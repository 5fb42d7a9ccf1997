//! Word-level vocabulary with single-digit number pieces.
//!
//! Text is lowercased and cut into pieces: runs of letters, single ASCII
//! digits, and single symbols. A piece that starts a whitespace-delimited
//! word carries a leading `▁` marker when it is a letter run; a word that
//! starts with a digit or symbol is preceded by a bare `▁` token. That keeps
//! decoding lossless up to lowercasing and whitespace collapse, and makes
//! `user_12` come out as `user`, `_`, `1`, `2`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::CodecError;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const WORD_START: &str = "▁";

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

pub const MIN_CAP: usize = 16;

/// Tokens present in every vocabulary, in id order.
fn fixed_tokens() -> Vec<String> {
    let mut t = vec![
        PAD_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        WORD_START.to_string(),
    ];
    t.extend((0..10).map(|d| d.to_string()));
    t
}

/// One pre-tokenised piece with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub token: String,
    pub start: usize,
    pub end: usize,
}

pub fn pre_tokenize(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut word_start = true;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            word_start = true;
            continue;
        }
        if c.is_alphabetic() {
            let mut end = i + c.len_utf8();
            while let Some(&(j, n)) = iter.peek() {
                if !n.is_alphabetic() {
                    break;
                }
                end = j + n.len_utf8();
                iter.next();
            }
            let lower = text[i..end].to_lowercase();
            let token = if word_start {
                format!("{WORD_START}{lower}")
            } else {
                lower
            };
            pieces.push(Piece { token, start: i, end });
        } else {
            if word_start {
                pieces.push(Piece {
                    token: WORD_START.to_string(),
                    start: i,
                    end: i,
                });
            }
            let end = i + c.len_utf8();
            pieces.push(Piece {
                token: text[i..end].to_lowercase(),
                start: i,
                end,
            });
        }
        word_start = false;
    }
    pieces
}

/// Lowercase + whitespace collapse: what `decode(encode(t))` reproduces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials and digits first, then corpus pieces by descending frequency
    /// (ties lexicographic) until `cap` tokens.
    pub fn build<S: AsRef<str>>(texts: &[S], cap: usize) -> Result<Self, CodecError> {
        if cap < MIN_CAP {
            return Err(CodecError::CapTooSmall { cap, min: MIN_CAP });
        }
        let mut tokens = fixed_tokens();
        let fixed: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for piece in pre_tokenize(text.as_ref()) {
                if !fixed.contains(&piece.token) {
                    *counts.entry(piece.token).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (token, _) in ranked {
            if tokens.len() >= cap {
                break;
            }
            tokens.push(token);
        }
        Ok(Self::from_tokens(tokens).expect("built vocabulary is a bijection"))
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, CodecError> {
        let fixed = fixed_tokens();
        if tokens.len() < fixed.len() || tokens[..fixed.len()] != fixed[..] {
            return Err(CodecError::BadVocabFile(
                "vocabulary must start with <pad>, </s>, <unk>, ▁ and the ten digits".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CodecError::BadVocabFile(format!("invalid token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CodecError::BadVocabFile(format!("duplicate token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Surface pieces of `text`, without word-start markers.
    pub fn pieces(text: &str) -> Vec<String> {
        pre_tokenize(text)
            .into_iter()
            .filter(|p| p.token != WORD_START)
            .map(|p| p.token.trim_start_matches(WORD_START).to_string())
            .collect()
    }

    /// Token ids with each token's byte range in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(u32, usize, usize)> {
        pre_tokenize(text)
            .into_iter()
            .map(|p| (self.id(&p.token).unwrap_or(UNK), p.start, p.end))
            .collect()
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).into_iter().map(|(id, _, _)| id).collect()
    }

    /// Inverse of encoding up to [`normalize`]. Stops at the first EOS and
    /// skips padding.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => continue,
                EOS => break,
                UNK => out.push_str(" <unk>"),
                _ => match self.token(id) {
                    Some(t) => {
                        if let Some(rest) = t.strip_prefix(WORD_START) {
                            out.push(' ');
                            out.push_str(rest);
                        } else {
                            out.push_str(t);
                        }
                    }
                    None => out.push_str(" <unk>"),
                },
            }
        }
        out.trim_start().to_string()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// Content hash for manifests and checkpoint compatibility checks.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_orders_tokens() {
        let v = Vocab::build(&["a a b"], 16).unwrap();
        assert!(v.id("▁a").unwrap() < v.id("▁b").unwrap());
        assert_eq!(v.len(), 16);
    }

    #[test]
    fn ids_split_into_digit_pieces() {
        assert_eq!(Vocab::pieces("user_12"), vec!["user", "_", "1", "2"]);
        assert_eq!(Vocab::pieces("item_98's"), vec!["item", "_", "9", "8", "'", "s"]);
    }

    #[test]
    fn empty_corpus_keeps_specials_and_digits() {
        let v = Vocab::build::<&str>(&[], 64).unwrap();
        assert_eq!(v.len(), 14);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("7"), Some(4 + 7));
    }

    #[test]
    fn cap_below_minimum_is_rejected() {
        assert!(matches!(Vocab::build(&["x"], 15), Err(CodecError::CapTooSmall { .. })));
    }

    #[test]
    fn encode_basics() {
        let v = Vocab::build(&["hello world"], 32).unwrap();
        assert!(v.encode_ids("").is_empty());
        let ids = v.encode_ids("hello hello");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(v.encode_ids("hello zebra")[1], UNK);
    }

    #[test]
    fn decode_restores_normalised_text() {
        let text = "Generate  user_42's preference!  It's 100% fun.";
        let v = Vocab::build(&[text], 256).unwrap();
        assert_eq!(v.decode(&v.encode_ids(text)), normalize(text));
    }

    #[test]
    fn leading_symbol_words_keep_their_space() {
        let text = "costs 12 dollars (great)";
        let v = Vocab::build(&[text], 64).unwrap();
        assert_eq!(v.decode(&v.encode_ids(text)), text);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&["the user prefers strategic games"], 64).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
