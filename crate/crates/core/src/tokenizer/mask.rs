use rand::Rng;

use super::vocab::{Vocab, MASK, NUM_SPECIAL};
use super::EncodedSequence;

/// What a selected position is replaced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// The 80/10/10 split of BERT-style masking.
pub fn choose_replacement<R: Rng + ?Sized>(rng: &mut R) -> Replacement {
    let u: f64 = rng.random();
    if u < 0.8 {
        Replacement::Mask
    } else if u < 0.9 {
        Replacement::Random
    } else {
        Replacement::Keep
    }
}

/// A sequence prepared for masked-token prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: EncodedSequence,
    /// Original id at masked positions, `None` elsewhere.
    pub labels: Vec<Option<usize>>,
}

impl MaskedSequence {
    /// A sequence with nothing masked.
    pub fn unmasked(input: EncodedSequence) -> Self {
        let labels = vec![None; input.len()];
        MaskedSequence { input, labels }
    }

    pub fn mask_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
            .collect()
    }

    /// Labels with the IGNORE sentinel (-1) used in serialized form.
    pub fn serialized_labels(&self) -> Vec<i64> {
        self.labels
            .iter()
            .map(|l| l.map_or(super::IGNORE, |id| id as i64))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedBatch {
    pub sequences: Vec<MaskedSequence>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.labels.iter().filter(|l| l.is_some()).count())
            .sum()
    }
}

/// Selects each non-special position with probability `prob` and corrupts it.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &EncodedSequence, prob: f64, vocab: &Vocab, rng: &mut R) -> MaskedSequence {
    assert!((0.0..=1.0).contains(&prob), "mask probability {prob} outside [0, 1]");
    let mut input = seq.clone();
    let mut labels = vec![None; seq.len()];
    for (pos, label) in labels.iter_mut().enumerate() {
        if seq.special[pos] || !rng.random_bool(prob) {
            continue;
        }
        *label = Some(seq.ids[pos]);
        match choose_replacement(rng) {
            Replacement::Mask => input.ids[pos] = MASK,
            Replacement::Random => input.ids[pos] = rng.random_range(NUM_SPECIAL..vocab.len()),
            Replacement::Keep => {}
        }
    }
    MaskedSequence { input, labels }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{bpe::train_vocab_from_lines, encode};
    use super::*;

    fn setup() -> (Vocab, EncodedSequence) {
        let vocab = train_vocab_from_lines(["one two three four five six seven"], 40).unwrap();
        let seq = encode("one two three four five six seven", &vocab, 32);
        (vocab, seq)
    }

    #[test]
    fn prob_zero_masks_nothing() {
        let (vocab, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_tokens(&seq, 0.0, &vocab, &mut rng);
        assert!(m.mask_positions().is_empty());
        assert_eq!(m.input, seq);
    }

    #[test]
    fn prob_one_masks_every_content_position() {
        let (vocab, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_tokens(&seq, 1.0, &vocab, &mut rng);
        let expected: Vec<usize> = (0..seq.len()).filter(|&i| !seq.special[i]).collect();
        assert_eq!(m.mask_positions(), expected);
        for &p in &expected {
            assert_eq!(m.labels[p], Some(seq.ids[p]));
        }
    }

    #[test]
    fn special_positions_never_masked() {
        let (vocab, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = mask_tokens(&seq, 0.5, &vocab, &mut rng);
            for p in m.mask_positions() {
                assert!(!seq.special[p]);
            }
            for (i, l) in m.labels.iter().enumerate() {
                if l.is_none() {
                    assert_eq!(m.input.ids[i], seq.ids[i]);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (vocab, seq) = setup();
        let a = mask_tokens(&seq, 0.3, &vocab, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mask_tokens(&seq, 0.3, &vocab, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn serialized_labels_use_minus_one() {
        let (vocab, seq) = setup();
        let m = mask_tokens(&seq, 1.0, &vocab, &mut ChaCha8Rng::seed_from_u64(1));
        let s = m.serialized_labels();
        assert_eq!(s[0], -1);
        assert_eq!(s[1], seq.ids[1] as i64);
    }
}
