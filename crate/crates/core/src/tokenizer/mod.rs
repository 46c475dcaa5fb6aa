//! Hand-written SMILES rule tokenizer and a trainable unigram subword model.

mod rules;
mod unigram;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use hashbrown::HashMap;

pub use rules::{rule_spans, rule_tokenize};
pub use unigram::{
    corpus_log_likelihood, decode, em_step, encode, expected_counts, train_unigram, viterbi_score,
    Decoded,
    UnigramConfig,
};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: usize = 5;

/// Surface forms of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<bos>", "<pad>", "<eos>", "<unk>", "<mask>"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizerError {
    #[error("bracket opened at {0} is never closed")]
    UnclosedBracket(usize),
    #[error("illegal character {ch:?} at {pos}")]
    IllegalCharacter { pos: usize, ch: char },
    #[error("empty training corpus")]
    CorpusEmpty,
    #[error("target size {target} is smaller than the alphabet ({alphabet} characters)")]
    TargetTooSmall { target: usize, alphabet: usize },
    #[error("text cannot be segmented with the vocabulary")]
    UncoverableText,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Special tokens at ids `0..5` followed by subword pieces with their
/// log-probabilities.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<(String, f64)>,
    index: HashMap<String, u32>,
    /// Longest piece, in characters.
    max_chars: usize,
    /// Score of an unknown character during encoding.
    unk_score: f64,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.to_bits() == y.to_bits())
    }
}

impl Vocab {
    /// Builds a vocabulary from non-special pieces; specials are prepended.
    pub fn from_pieces(pieces: Vec<(String, f64)>) -> Result<Self, TokenizerError> {
        let mut entries: Vec<(String, f64)> =
            SPECIAL_TOKENS.iter().map(|s| (s.to_string(), 0.0)).collect();
        entries.extend(pieces);
        Self::from_entries(entries)
    }

    /// Builds from the full entry list, which must start with the specials
    /// in their fixed order.
    pub fn from_entries(entries: Vec<(String, f64)>) -> Result<Self, TokenizerError> {
        if entries.len() < NUM_SPECIAL
            || entries.iter().zip(SPECIAL_TOKENS).any(|((t, _), s)| t != s)
        {
            return Err(TokenizerError::InvalidVocab(
                "special tokens must occupy ids 0-4 in order <bos> <pad> <eos> <unk> <mask>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut max_chars = 1;
        let mut min_score = 0.0f64;
        for (i, (tok, lp)) in entries.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokenizerError::InvalidVocab("empty token".into()));
            }
            if lp.is_nan() || *lp > 0.0 {
                return Err(TokenizerError::InvalidVocab(alloc::format!(
                    "log-probability of {tok:?} must be <= 0"
                )));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(alloc::format!("duplicate token {tok:?}")));
            }
            if i >= NUM_SPECIAL {
                max_chars = max_chars.max(tok.chars().count());
                if lp.is_finite() {
                    min_score = min_score.min(*lp);
                }
            }
        }
        Ok(Vocab { entries, index, max_chars, unk_score: min_score - 10.0 })
    }

    /// Total entries including specials.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == NUM_SPECIAL
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// Non-special pieces.
    pub fn pieces(&self) -> &[(String, f64)] {
        &self.entries[NUM_SPECIAL..]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|(t, _)| t.as_str())
    }

    pub fn log_prob(&self, id: u32) -> Option<f64> {
        self.entries.get(id as usize).map(|&(_, lp)| lp)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    pub fn max_piece_chars(&self) -> usize {
        self.max_chars
    }

    pub(crate) fn unk_score(&self) -> f64 {
        self.unk_score
    }

    /// Id of a non-special piece, for lattice construction.
    pub(crate) fn piece_id(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied().filter(|&id| !Self::is_special(id))
    }
}

/// Encoded ids with the byte span of each token in the source text.
/// Special tokens carry zero-width spans at the boundary they sit on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-special tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| !Vocab::is_special(id)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_validation() {
        let v = Vocab::from_pieces(alloc::vec![("C".into(), -0.5), ("CC".into(), -1.0)]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("CC"), Some(6));
        assert_eq!(v.token(MASK), Some("<mask>"));
        assert_eq!(v.max_piece_chars(), 2);
        assert!(Vocab::from_pieces(alloc::vec![("C".into(), 0.5)]).is_err());
        assert!(Vocab::from_pieces(alloc::vec![("C".into(), -1.0), ("C".into(), -1.0)]).is_err());
        let bad = alloc::vec![("<pad>".to_string(), 0.0)];
        assert!(Vocab::from_entries(bad).is_err());
    }
}
