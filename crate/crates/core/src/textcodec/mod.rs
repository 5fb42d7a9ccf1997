//! Tokenisation, entity templates and whole-word indices.

mod template;
mod vocab;

use std::ops::Range;

use thiserror::Error;

pub use template::{item_surface, render_task_input, user_surface, Rendered, TaskInput};
pub use vocab::{
    normalize, pre_tokenize, Piece, Vocab, EOS, EOS_TOKEN, MIN_CAP, PAD, PAD_TOKEN, UNK, UNK_TOKEN,
    WORD_START,
};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("vocabulary cap {cap} is below the minimum of {min}")]
    CapTooSmall { cap: usize, min: usize },
    #[error("entity spans overlap or are out of order: {0:?} then {1:?}")]
    OverlappingSpans(Range<usize>, Range<usize>),
    #[error("entity span {span:?} is out of bounds for {len} tokens")]
    SpanOutOfBounds { span: Range<usize>, len: usize },
    #[error("entity span {0:?} covers no token")]
    EmptySpan(Range<usize>),
    #[error("bad vocabulary file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model input: token ids plus a whole-word index per position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub whole_word: Vec<u32>,
}

impl TokenSequence {
    pub fn plain(ids: Vec<u32>) -> Self {
        let whole_word = vec![0; ids.len()];
        Self { ids, whole_word }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of distinct entity mentions (the largest whole-word index).
    pub fn mention_count(&self) -> u32 {
        self.whole_word.iter().copied().max().unwrap_or(0)
    }
}

/// Encodes `text` with every whole-word index left at 0.
pub fn encode(text: &str, vocab: &Vocab) -> TokenSequence {
    TokenSequence::plain(vocab.encode_ids(text))
}

pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    vocab.decode(ids)
}

/// Positions inside the k-th span (token ranges, 0-based) get index `k + 1`;
/// everything else gets 0. Indices count mentions, not identities.
pub fn whole_word_index<S>(tokens: &[S], spans: &[Range<usize>]) -> Result<Vec<u32>, CodecError> {
    let mut out = vec![0u32; tokens.len()];
    let mut prev: Option<&Range<usize>> = None;
    for (k, span) in spans.iter().enumerate() {
        if span.end > tokens.len() {
            return Err(CodecError::SpanOutOfBounds {
                span: span.clone(),
                len: tokens.len(),
            });
        }
        if span.start >= span.end {
            return Err(CodecError::EmptySpan(span.clone()));
        }
        if let Some(p) = prev {
            if span.start < p.end {
                return Err(CodecError::OverlappingSpans(p.clone(), span.clone()));
            }
        }
        for slot in &mut out[span.clone()] {
            *slot = k as u32 + 1;
        }
        prev = Some(span);
    }
    Ok(out)
}

/// Token ranges covered by byte-range `spans` of the encoded text.
pub fn token_spans(offsets: &[(u32, usize, usize)], spans: &[Range<usize>]) -> Vec<Range<usize>> {
    spans
        .iter()
        .map(|span| {
            let inside = |&(_, start, _): &(u32, usize, usize)| span.start <= start && start < span.end;
            let first = offsets.iter().position(inside).unwrap_or(offsets.len());
            let count = offsets[first..].iter().take_while(|o| inside(o)).count();
            first..first + count
        })
        .collect()
}

/// Encodes a rendered template and marks each entity mention.
pub fn encode_rendered(rendered: &Rendered, vocab: &Vocab) -> Result<TokenSequence, CodecError> {
    let offsets = vocab.encode_with_offsets(&rendered.text);
    let spans = token_spans(&offsets, &rendered.spans);
    let whole_word = whole_word_index(&offsets, &spans)?;
    Ok(TokenSequence {
        ids: offsets.into_iter().map(|(id, _, _)| id).collect(),
        whole_word,
    })
}

/// Target ids for a text: its tokens followed by EOS.
pub fn encode_target(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = vocab.encode_ids(text);
    ids.push(EOS);
    ids
}
