use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

const WORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "and", "on", "in", "painting", "photo", "elephant", "glasses", "cat", "dog",
    "frog", "crown", "apple", "leopard", "camera", "artichoke", "book", "bed", "bear", "turtle", "bird", "hat",
    "car", "tree", "bench", "clock", "balloon", "bowl", "horse", "chair", "lemon", "guitar",
];

/// Fixed toy vocabulary: three special tokens followed by [`WORDS`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// One unit-norm row per token id.
    pub embeddings: Array2<f64>,
}

impl Vocabulary {
    pub fn seeded(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_70c4);
        let n = WORDS.len() + 3;
        let mut embeddings: Array2<f64> = Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(&mut rng));
        for mut row in embeddings.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        Self { embeddings }
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(word: &str) -> Result<usize> {
        match word {
            "<bos>" => Ok(BOS),
            "<eos>" => Ok(EOS),
            "<pad>" => Ok(PAD),
            w => WORDS
                .iter()
                .position(|x| *x == w)
                .map(|p| p + 3)
                .ok_or_else(|| Error::UnknownToken(word.to_string())),
        }
    }

    pub fn word(id: usize) -> &'static str {
        match id {
            BOS => "<bos>",
            EOS => "<eos>",
            PAD => "<pad>",
            i => WORDS.get(i - 3).copied().unwrap_or("<unk>"),
        }
    }

    pub fn words() -> &'static [&'static str] {
        WORDS
    }
}

/// A padded token sequence: `BOS w1 .. wk EOS PAD ..`, length `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub ids: Vec<usize>,
    /// Number of non-padding positions (BOS and EOS included).
    pub used: usize,
}

impl Prompt {
    pub fn from_ids(words: &[usize], max_len: usize) -> Result<Self> {
        if words.len() + 2 > max_len {
            return Err(crate::error::invalid(
                "prompt",
                format!("{} words do not fit {max_len} positions", words.len()),
            ));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.push(EOS);
        let used = ids.len();
        ids.resize(max_len, PAD);
        Ok(Self { ids, used })
    }

    pub fn parse(text: &str, max_len: usize) -> Result<Self> {
        let words = text
            .split_whitespace()
            .map(|w| Vocabulary::id(&w.to_lowercase()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_ids(&words, max_len)
    }

    /// The unconditional prompt: `BOS EOS PAD ..`.
    pub fn empty(max_len: usize) -> Self {
        Self::from_ids(&[], max_len).expect("max_len >= 2")
    }

    pub fn eos_position(&self) -> usize {
        self.used - 1
    }

    pub fn first_pad(&self) -> Option<usize> {
        (self.used < self.ids.len()).then_some(self.used)
    }

    /// Position of the first occurrence of a word.
    pub fn position_of(&self, word: &str) -> Result<usize> {
        let id = Vocabulary::id(word)?;
        self.ids[..self.used]
            .iter()
            .position(|&t| t == id)
            .ok_or_else(|| Error::UnknownToken(format!("{word} (not in prompt)")))
    }

    pub fn check_targets(&self, targets: &[usize]) -> Result<()> {
        for &t in targets {
            if t >= self.ids.len() {
                return Err(Error::IndexOutOfRange {
                    what: "target position",
                    index: t,
                    len: self.ids.len(),
                });
            }
            if t >= self.used {
                return Err(Error::TargetIsPadding { position: t });
            }
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.ids[1..self.used - 1]
            .iter()
            .map(|&i| Vocabulary::word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_rows() {
        let v = Vocabulary::seeded(1, 8);
        for row in v.embeddings.outer_iter() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(v, Vocabulary::seeded(1, 8));
    }

    #[test]
    fn prompt_layout() {
        let p = Prompt::parse("a painting of an Elephant with glasses", 16).unwrap();
        assert_eq!(p.ids[0], BOS);
        assert_eq!(p.ids[p.eos_position()], EOS);
        assert_eq!(p.used, 9);
        assert_eq!(p.ids.len(), 16);
        assert_eq!(p.position_of("elephant").unwrap(), 5);
        assert_eq!(p.text(), "a painting of an elephant with glasses");
        assert!(matches!(p.check_targets(&[9]), Err(Error::TargetIsPadding { position: 9 })));
        assert!(p.check_targets(&[5, 7]).is_ok());
        assert!(Prompt::parse("a zebra", 16).is_err());
        assert!(Prompt::from_ids(&[3; 15], 16).is_err());
    }
}
