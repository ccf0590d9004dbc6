//! Downstream sentence classifier used to score augmentation: embedding,
//! transformer encoder, max-pool over time, linear head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::corpus::{Batch, LabeledSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::argmax;
use crate::nn::{batched_positions, Encoder, EncoderShape, InitScheme, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::training::losses::cross_entropy_var;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub attn_hidden: usize,
    pub ffn_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            attn_hidden: 64,
            ffn_hidden: 256,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            init: InitScheme::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            model_dim: self.embed_dim,
            layers: self.n_layers,
            heads: self.n_heads,
            attn_hidden: self.attn_hidden,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_shape().validate("classifier").map_err(Error::Config)?;
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("classifier learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<F: Real> {
    pub config: ClassifierConfig,
    pub params: ParamStore<F>,
    pub vocab_size: usize,
    pub num_categories: usize,
    embedding: ParamId,
    encoder: Encoder,
    head: Linear,
}

impl<F: Real> Classifier<F> {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, vocab_size: usize, num_categories: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if num_categories < 2 {
            return Err(Error::TooFewCategories(num_categories));
        }
        let init = config.init;
        let mut params = ParamStore::new();
        let embedding = params.init("embedding", vocab_size, config.embed_dim, init.embedding(), rng);
        let encoder = Encoder::new(&mut params, "encoder", config.encoder_shape(), init, rng);
        let head = Linear::new(&mut params, "head", config.embed_dim, num_categories, true, init, rng);
        Ok(Classifier {
            config,
            params,
            vocab_size,
            num_categories,
            embedding,
            encoder,
            head,
        })
    }

    /// `B×k` logits.
    pub fn logits(&self, g: &mut Graph<F>, batch: &Batch) -> Result<Var> {
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: self.vocab_size });
        }
        let (b, len) = (batch.size(), batch.max_len());
        let table = g.param(&self.params, self.embedding);
        let flat: Vec<usize> = batch.ids.iter().copied().collect();
        let emb = g.gather_rows(table, &flat);
        let pe = g.leaf(batched_positions(b, len, self.config.embed_dim));
        let x = g.add(emb, pe);
        let valid = batch.valid_mask();
        let h = self.encoder.forward(g, &self.params, x, b, len, Some(&valid));
        let pooled = g.max_pool_rows(h, b, &valid);
        Ok(self.head.forward(g, &self.params, pooled))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, batch)?;
        Ok(g.value(logits).rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Fraction of `sentences` whose label is predicted.
    pub fn accuracy(&self, sentences: &[LabeledSentence], vocab: &Vocabulary, max_len: usize) -> Result<f64> {
        if sentences.is_empty() {
            return Err(Error::EmptySplit("evaluation".into()));
        }
        let mut correct = 0;
        for chunk in sentences.chunks(256) {
            let batch = Batch::encode(chunk, vocab, max_len);
            let pred = self.predict(&batch)?;
            correct += pred.iter().zip(&batch.categories).filter(|(p, c)| p == c).count();
        }
        Ok(correct as f64 / sentences.len() as f64)
    }
}

/// Trains a fresh classifier with cross-entropy for `config.epochs` passes
/// over shuffled mini-batches. The training set is put in a canonical order
/// first, so the result does not depend on how the caller ordered it.
pub fn train_classifier<F: Real, R: Rng + ?Sized>(
    train: &[LabeledSentence],
    vocab: &Vocabulary,
    num_categories: usize,
    max_len: usize,
    config: &ClassifierConfig,
    rng: &mut R,
) -> Result<Classifier<F>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("classifier training".into()));
    }
    let mut train: Vec<&LabeledSentence> = train.iter().collect();
    train.sort_by(|a, b| (a.category, &a.tokens).cmp(&(b.category, &b.tokens)));
    let mut clf = Classifier::<F>::new(*config, vocab.len(), num_categories, rng)?;
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &clf.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for idx in order.chunks(config.batch_size) {
            let batch = Batch::encode(idx.iter().map(|&i| train[i]), vocab, max_len);
            let mut g = Graph::new();
            let logits = clf.logits(&mut g, &batch)?;
            let probs = g.softmax_rows(logits);
            let loss = cross_entropy_var(&mut g, probs, &batch.categories)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("classifier loss {value}"),
                });
            }
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &clf.params);
            adam.step(&mut clf.params, &pg);
            step += 1;
        }
    }
    Ok(clf)
}
