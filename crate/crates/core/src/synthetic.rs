//! Synthetic corpora with a known category rule, for end-to-end checks.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{Dataset, LabeledSentence};
use crate::error::{Error, Result};

/// Each category owns a disjoint token set; a sentence belongs to a
/// category iff every token comes from that category's set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyGrammar {
    pub token_sets: Vec<Vec<String>>,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl ToyGrammar {
    /// `k` categories of `per_set` tokens each (`c{cat}w{i}`), sentence
    /// lengths in `min_tokens..=max_tokens`.
    pub fn new(k: usize, per_set: usize, min_tokens: usize, max_tokens: usize) -> Result<Self> {
        if k < 2 || per_set == 0 || min_tokens == 0 || min_tokens > max_tokens {
            return Err(Error::InvalidInput(format!(
                "invalid grammar shape k={k} per_set={per_set} lengths {min_tokens}..={max_tokens}"
            )));
        }
        let token_sets = (0..k)
            .map(|c| (0..per_set).map(|i| format!("c{c}w{i}")).collect())
            .collect();
        Ok(ToyGrammar {
            token_sets,
            min_tokens,
            max_tokens,
        })
    }

    /// Two categories of ten tokens, three to eight tokens per sentence:
    /// `V = 24` with the special tokens and `T = 10` with BOS/EOS.
    pub fn two_category() -> Self {
        Self::new(2, 10, 3, 8).expect("valid shape")
    }

    pub fn num_categories(&self) -> usize {
        self.token_sets.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, category: usize, rng: &mut R) -> Vec<String> {
        let set = &self.token_sets[category];
        let len = rng.random_range(self.min_tokens..=self.max_tokens);
        (0..len).map(|_| set.choose(rng).expect("non-empty set").clone()).collect()
    }

    /// `per_class` sentences of every category, interleaved.
    pub fn sentences<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Vec<LabeledSentence> {
        let mut out = Vec::with_capacity(per_class * self.num_categories());
        for _ in 0..per_class {
            for c in 0..self.num_categories() {
                out.push(LabeledSentence::new(self.sample(c, rng), c));
            }
        }
        out
    }

    /// Train/valid/test splits with `T = max_tokens + 2`.
    pub fn dataset<R: Rng + ?Sized>(&self, train: usize, valid: usize, test: usize, rng: &mut R) -> Result<Dataset> {
        let train = self.sentences(train, rng);
        let valid = self.sentences(valid, rng);
        let test = self.sentences(test, rng);
        Dataset::from_splits(train, valid, test, self.max_tokens + 2, 1)
    }

    /// The category whose token set contains every token, if any.
    pub fn classify(&self, tokens: &[String]) -> Option<usize> {
        if tokens.is_empty() {
            return None;
        }
        self.token_sets
            .iter()
            .position(|set| tokens.iter().all(|t| set.contains(t)))
    }
}
