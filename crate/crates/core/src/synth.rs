//! Synthetic parallel corpora: random sentences over an invented lexicon and
//! their renditions in Greek-codepoint substitution ciphers.
//!
//! The ciphers are the inverse of the bundled `cipher` rule table, so
//! romanizing a cipher sentence recovers the Latin original exactly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};

/// Images of `a..=z` in the lowercase Greek cipher.
pub const LOWER_CIPHER: [char; 26] = [
    'α', 'β', 'γ', 'δ', 'ε', 'ζ', 'η', 'θ', 'ι', 'κ', 'λ', 'μ', 'ν', 'ξ', 'ο', 'π', 'ρ', 'σ', 'τ', 'υ', 'φ', 'χ', 'ψ',
    'ω', 'ϙ', 'ϝ',
];

/// Images of `a..=z` in the uppercase Greek cipher.
pub const UPPER_CIPHER: [char; 26] = [
    'Α', 'Β', 'Γ', 'Δ', 'Ε', 'Ζ', 'Η', 'Θ', 'Ι', 'Κ', 'Λ', 'Μ', 'Ν', 'Ξ', 'Ο', 'Π', 'Ρ', 'Σ', 'Τ', 'Υ', 'Φ', 'Χ', 'Ψ',
    'Ω', 'Ϙ', 'Ϝ',
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CipherAlphabet {
    Lower,
    Upper,
}

impl CipherAlphabet {
    fn table(self) -> &'static [char; 26] {
        match self {
            CipherAlphabet::Lower => &LOWER_CIPHER,
            CipherAlphabet::Upper => &UPPER_CIPHER,
        }
    }
}

/// Replaces each ASCII lowercase letter by its cipher image.
pub fn encipher(text: &str, alphabet: CipherAlphabet) -> String {
    let table = alphabet.table();
    text.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                table[(c as u8 - b'a') as usize]
            } else {
                c
            }
        })
        .collect()
}

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "kl",
];
const NUCLEI: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: [&str; 6] = ["", "", "n", "r", "s", "k"];

/// `size` distinct pronounceable words of one to three syllables.
pub fn lexicon<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = rng.random_range(1..=3);
        let word: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}{}",
                    ONSETS.choose(rng).expect("non-empty"),
                    NUCLEI.choose(rng).expect("non-empty"),
                    CODAS.choose(rng).expect("non-empty")
                )
            })
            .collect();
        if seen.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

/// Sentences of `min_words..=max_words` words drawn Zipf-distributed from
/// `lexicon` (earlier words are more frequent).
pub fn sentences<R: Rng + ?Sized>(
    n: usize,
    lexicon: &[String],
    min_words: usize,
    max_words: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if lexicon.is_empty() || min_words == 0 || min_words > max_words {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty lexicon and 1 <= min_words <= max_words, got {} words, {min_words}..={max_words}",
            lexicon.len()
        )));
    }
    let zipf = Zipf::new(lexicon.len() as f64, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(min_words..=max_words);
            (0..len)
                .map(|_| lexicon[zipf.sample(rng) as usize - 1].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

/// A Latin corpus and its line-aligned cipher rendition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherCorpus {
    pub latin: Vec<String>,
    pub cipher: Vec<String>,
}

/// `n` sentences over a 300-word lexicon; line `i` is enciphered with
/// `alphabets[i % alphabets.len()]`.
pub fn cipher_corpus(n: usize, seed: u64, alphabets: &[CipherAlphabet]) -> Result<CipherCorpus> {
    if alphabets.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one cipher alphabet is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lexicon(300, &mut rng);
    let latin = sentences(n, &words, 3, 7, &mut rng)?;
    let cipher = latin
        .iter()
        .enumerate()
        .map(|(i, s)| encipher(s, alphabets[i % alphabets.len()]))
        .collect();
    Ok(CipherCorpus { latin, cipher })
}
