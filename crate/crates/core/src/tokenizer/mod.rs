//! Subword vocabulary, sequence encoding and MLM masking.
//!
//! One vocabulary is shared by original-script and romanized text.

mod bpe;
mod mask;
mod vocab;

pub use bpe::{train_vocab, train_vocab_from_lines};
pub use mask::{choose_replacement, mask_tokens, MaskedBatch, MaskedSequence, Replacement};
pub use vocab::{normalize, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK, WORD_START};

/// Serialized label for positions that carry no prediction target.
pub const IGNORE: i64 = -1;

/// Token ids with attention and special-position flags, all the same length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub attention: Vec<bool>,
    /// CLS, SEP and PAD positions.
    pub special: Vec<bool>,
}

impl EncodedSequence {
    /// Wraps content segments as `CLS s1 SEP [s2 SEP ...]` and pads to `max_len`.
    /// The caller is responsible for the total fitting in `max_len`.
    pub fn from_segments(segments: &[&[usize]], max_len: usize) -> Self {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        for seg in segments {
            ids.extend_from_slice(seg);
            ids.push(SEP);
        }
        assert!(
            ids.len() <= max_len,
            "sequence of {} exceeds max_len {max_len}",
            ids.len()
        );
        let real = ids.len();
        ids.resize(max_len, PAD);
        let attention = (0..max_len).map(|i| i < real).collect();
        let special = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| i >= real || id == CLS || id == SEP)
            .collect();
        EncodedSequence {
            ids,
            attention,
            special,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.attention.iter().filter(|&&a| a).count()
    }

    /// Ids of the non-special positions, in order.
    pub fn content(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.special)
            .filter(|(_, &s)| !s)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// `CLS tokens SEP`, truncated and PAD-filled to exactly `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> EncodedSequence {
    assert!(max_len >= 3, "max_len must be at least 3, got {max_len}");
    let mut ids = vocab.tokenize(text);
    ids.truncate(max_len - 2);
    EncodedSequence::from_segments(&[&ids], max_len)
}

/// Encodes pre-split words and reports, per position, the index of the word
/// whose first subword sits there.
pub fn encode_words(words: &[&str], vocab: &Vocab, max_len: usize) -> (EncodedSequence, Vec<Option<usize>>) {
    assert!(max_len >= 3, "max_len must be at least 3, got {max_len}");
    let mut ids = Vec::new();
    let mut first_of = Vec::new();
    for (w, word) in words.iter().enumerate() {
        let start = ids.len();
        for piece in word.split_whitespace() {
            vocab.tokenize_word(piece, &mut ids);
        }
        first_of.extend((start..ids.len()).map(|p| (p == start).then_some(w)));
    }
    ids.truncate(max_len - 2);
    first_of.truncate(max_len - 2);
    let seq = EncodedSequence::from_segments(&[&ids], max_len);
    let mut word_starts = vec![None];
    word_starts.extend(first_of);
    word_starts.resize(max_len, None);
    (seq, word_starts)
}
