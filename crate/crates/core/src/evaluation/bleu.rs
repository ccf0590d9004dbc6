//! Sentence-level BLEU against a pooled reference corpus, averaged over
//! hypotheses.
//!
//! Counts are clipped by the largest count of each n-gram in any single
//! reference. An order `n ≥ 2` with no matching n-gram scores
//! `1 / (total + 1)` (add-one on numerator and denominator); a hypothesis
//! with no matching unigram scores 0. The brevity penalty uses the
//! reference length closest to the hypothesis length, shorter on ties.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub references: Vec<Vec<String>>,
}

/// Pre-counted reference corpus.
#[derive(Debug, Clone)]
pub struct BleuReference {
    max_n: usize,
    max_counts: Vec<HashMap<Vec<String>, usize>>,
    lengths: Vec<usize>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuReference {
    pub fn new(references: &[Vec<String>], max_n: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidInput("BLEU needs at least one reference".into()));
        }
        if max_n == 0 {
            return Err(Error::InvalidInput("BLEU order must be ≥ 1".into()));
        }
        let mut max_counts: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); max_n];
        for r in references {
            for (n, table) in (1..=max_n).zip(max_counts.iter_mut()) {
                for (gram, c) in ngram_counts(r, n) {
                    let slot = table.entry(gram.to_vec()).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
        }
        let mut lengths: Vec<usize> = references.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        Ok(BleuReference {
            max_n,
            max_counts,
            lengths,
        })
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    fn closest_length(&self, len: usize) -> usize {
        let mut best = self.lengths[0];
        for &r in &self.lengths {
            if r.abs_diff(len) < best.abs_diff(len) {
                best = r;
            }
        }
        best
    }

    /// `(matched, total)` n-gram counts of `hypothesis` for order `n`.
    pub fn matches(&self, hypothesis: &[String], n: usize) -> (usize, usize) {
        let table = &self.max_counts[n - 1];
        let counts = ngram_counts(hypothesis, n);
        let total = counts.values().sum();
        let matched = counts
            .iter()
            .map(|(gram, &c)| c.min(table.get(*gram).copied().unwrap_or(0)))
            .sum();
        (matched, total)
    }

    pub fn sentence_score(&self, hypothesis: &[String]) -> f64 {
        if hypothesis.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 1..=self.max_n {
            let (matched, total) = self.matches(hypothesis, n);
            let p = if matched > 0 {
                matched as f64 / total as f64
            } else if n == 1 {
                return 0.0;
            } else {
                1.0 / (total as f64 + 1.0)
            };
            log_sum += p.ln();
        }
        let c = hypothesis.len();
        let r = self.closest_length(c);
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        bp * (log_sum / self.max_n as f64).exp()
    }

    /// Mean sentence score.
    pub fn corpus_score(&self, hypotheses: &[Vec<String>]) -> Result<f64> {
        if hypotheses.is_empty() {
            return Err(Error::InvalidInput("BLEU needs at least one hypothesis".into()));
        }
        let total: f64 = hypotheses.iter().map(|h| self.sentence_score(h)).sum();
        Ok(total / hypotheses.len() as f64)
    }
}

pub fn bleu_n(hypotheses: &[Vec<String>], config: &BleuConfig) -> Result<f64> {
    BleuReference::new(&config.references, config.max_n)?.corpus_score(hypotheses)
}
