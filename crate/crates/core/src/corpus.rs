//! Tokenized labeled corpora: vocabulary, dataset files, encoding and batching.
//!
//! Dataset files are UTF-8, one example per line:
//! `<category-id>\t<space-separated tokens>`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::Real;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Tokens with frequency ≥ `min_freq` get ids from 4 upward, most
    /// frequent first, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if sentences.is_empty() || sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be ≥ 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, n)| n >= min_freq && !SPECIAL_TOKENS.contains(&tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())))
    }

    /// Vocabulary with the specials followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `[BOS, ids…, EOS, PAD…]` of exactly `max_len`; overflow is truncated so
    /// that EOS sits at `min(len + 1, max_len − 1)`.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S], max_len: usize) -> Vec<usize> {
        assert!(max_len >= 3, "max_len must leave room for BOS, a token and EOS");
        let mut out = Vec::with_capacity(max_len);
        out.push(BOS);
        out.extend(
            sentence
                .iter()
                .take(max_len - 2)
                .map(|t| self.id_or_unk(t.as_ref())),
        );
        out.push(EOS);
        out.resize(max_len, PAD);
        out
    }

    /// Drops BOS and PAD and stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id >= self.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.len(),
                });
            }
        }
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(self.id_to_token[id].clone()),
            }
        }
        Ok(out)
    }

    /// Four-line special-token header, then one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for tok in &self.id_to_token {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIAL || lines[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::InvalidInput(
                "vocabulary file must start with the four special tokens".into(),
            ));
        }
        let vocab = Self::from_tokens(lines[NUM_SPECIAL..].iter().map(|s| s.to_string()));
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(Error::InvalidInput("duplicate token in vocabulary file".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub category: usize,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, category: usize) -> Self {
        LabeledSentence { tokens, category }
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}", self.category, self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledSentence>,
    pub valid: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub num_categories: usize,
    pub max_len: usize,
    pub vocab: Vocabulary,
}

/// Parses one dataset file's contents; `origin` only labels errors.
pub fn parse_labeled(text: &str, origin: &Path) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Format {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let (cat, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `<category>\\t<tokens>`".into()))?;
        let category: usize = cat
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid category id `{cat}`")))?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(err("sentence has no tokens".into()));
        }
        out.push(LabeledSentence { tokens, category });
    }
    Ok(out)
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled(&text, path)
}

pub fn write_labeled(path: &Path, sentences: &[LabeledSentence]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn load(
        train_path: &Path,
        valid_path: &Path,
        test_path: &Path,
        max_len: usize,
        min_freq: usize,
    ) -> Result<Self> {
        Self::from_splits(
            read_labeled(train_path)?,
            read_labeled(valid_path)?,
            read_labeled(test_path)?,
            max_len,
            min_freq,
        )
    }

    /// Builds the vocabulary from `train` only and infers `k = 1 + max id`.
    pub fn from_splits(
        train: Vec<LabeledSentence>,
        valid: Vec<LabeledSentence>,
        test: Vec<LabeledSentence>,
        max_len: usize,
        min_freq: usize,
    ) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} < 3")));
        }
        let all = || train.iter().chain(&valid).chain(&test);
        let max_cat = all().map(|s| s.category).max().ok_or(Error::EmptyCorpus)?;
        let mut seen = vec![false; max_cat + 1];
        for s in all() {
            seen[s.category] = true;
        }
        if let Some(missing) = seen.iter().position(|&x| !x) {
            return Err(Error::CategoryGap {
                missing,
                max: max_cat,
            });
        }
        let k = max_cat + 1;
        if k < 2 {
            return Err(Error::TooFewCategories(k));
        }
        let token_lists: Vec<Vec<String>> = train.iter().map(|s| s.tokens.clone()).collect();
        let vocab = Vocabulary::build(&token_lists, min_freq)?;
        Ok(Dataset {
            train,
            valid,
            test,
            num_categories: k,
            max_len,
            vocab,
        })
    }

    pub fn split(&self, split: Split) -> &[LabeledSentence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn category_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_categories];
        for s in self.split(split) {
            counts[s.category] += 1;
        }
        counts
    }

    /// Encodes the given sentences into a batch.
    pub fn batch_of<'a>(&self, sentences: impl IntoIterator<Item = &'a LabeledSentence>) -> Batch {
        Batch::encode(sentences, &self.vocab, self.max_len)
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, split: Split, size: usize, rng: &mut R) -> Result<Batch> {
        let pool = self.split(split);
        if pool.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        if size == 0 {
            return Err(Error::EmptyBatch);
        }
        let picks: Vec<&LabeledSentence> = (0..size)
            .map(|_| &pool[rng.random_range(0..pool.len())])
            .collect();
        Ok(self.batch_of(picks))
    }
}

/// Right-padded id matrix plus per-row categories and true lengths
/// (BOS and EOS included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Array2<usize>,
    pub categories: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn encode<'a>(
        sentences: impl IntoIterator<Item = &'a LabeledSentence>,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Batch {
        let mut ids = Vec::new();
        let mut categories = Vec::new();
        let mut lengths = Vec::new();
        for s in sentences {
            let row = vocab.encode(&s.tokens, max_len);
            lengths.push((s.tokens.len() + 2).min(max_len));
            ids.extend(row);
            categories.push(s.category);
        }
        let rows = categories.len();
        Batch {
            ids: Array2::from_shape_vec((rows, max_len), ids).expect("rows of max_len"),
            categories,
            lengths,
        }
    }

    /// Batch from raw id rows; lengths run up to and including the first EOS.
    pub fn from_ids(ids: Array2<usize>, categories: Vec<usize>) -> Batch {
        assert_eq!(ids.nrows(), categories.len());
        let lengths = ids
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .position(|&t| t == EOS)
                    .map(|p| p + 1)
                    .unwrap_or_else(|| row.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1))
            })
            .collect();
        Batch {
            ids,
            categories,
            lengths,
        }
    }

    pub fn size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.ids.ncols()
    }

    /// Row-major `(B·T)` mask of non-PAD positions.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    pub fn rows(&self, index: &[usize]) -> Batch {
        Batch {
            ids: self.ids.select(ndarray::Axis(0), index),
            categories: index.iter().map(|&i| self.categories[i]).collect(),
            lengths: index.iter().map(|&i| self.lengths[i]).collect(),
        }
    }
}

/// One-hot rows, laid out `(B·T)×V` (row `b·T + t` is position `t` of
/// sentence `b`).
pub fn one_hot<F: Real>(ids: &Array2<usize>, vocab_size: usize) -> Result<Array2<F>> {
    let mut out = Array2::zeros((ids.len(), vocab_size));
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            });
        }
        out[[r, id]] = F::one();
    }
    Ok(out)
}

/// One-hot rows for a vector of class ids.
pub fn one_hot_categories<F: Real>(categories: &[usize], k: usize) -> Result<Array2<F>> {
    let ids = Array2::from_shape_vec((categories.len(), 1), categories.to_vec()).expect("column");
    one_hot(&ids, k).map_err(|e| match e {
        Error::TokenOutOfRange { id, size } => Error::CategoryOutOfRange { category: id, k: size },
        other => other,
    })
}
