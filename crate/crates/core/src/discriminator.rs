//! Dual-head discriminator over whole sentences.
//!
//! Sentences arrive as `(B·T)×V` rows, row `b·T + t`: one-hot rows for real
//! text, relaxed probability rows for generated text. A bias-free linear
//! embedding, sinusoidal positions and a transformer encoder feed a mean
//! pool, followed by a sigmoid authenticity head `D_r` and a softmax
//! category head `D_cls`. Every position is attended, PAD included, so real
//! and generated sequences are treated the same way.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::corpus::{one_hot, Batch};
use crate::error::{Error, Result};
use crate::generator::check_layout;
use crate::nn::{batched_positions, mean_pool_matrix, Encoder, EncoderShape, InitScheme, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub embed_dim: usize,
    pub n_encoder_layers: usize,
    pub n_attn_heads: usize,
    pub attn_hidden: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub num_categories: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl DiscriminatorConfig {
    pub fn full_size(vocab_size: usize, num_categories: usize) -> Self {
        DiscriminatorConfig {
            embed_dim: 64,
            n_encoder_layers: 2,
            n_attn_heads: 2,
            attn_hidden: 64,
            ffn_hidden: 256,
            vocab_size,
            num_categories,
            init: InitScheme::default(),
        }
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            model_dim: self.embed_dim,
            layers: self.n_encoder_layers,
            heads: self.n_attn_heads,
            attn_hidden: self.attn_hidden,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_shape().validate("discriminator").map_err(Error::Config)?;
        if self.vocab_size < crate::corpus::NUM_SPECIAL {
            return Err(Error::Config("discriminator.vocab_size must be ≥ 4".into()));
        }
        if self.num_categories < 2 {
            return Err(Error::Config("discriminator.num_categories must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Tape handles for one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorVars {
    /// `B×1` authenticity scores in (0, 1).
    pub d_r: Var,
    /// `B×k` category probabilities.
    pub d_cls: Var,
}

/// Plain-value discriminator output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput<F: Real> {
    pub d_r: Vec<F>,
    pub d_cls: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<F: Real> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<F>,
    embedding: ParamId,
    encoder: Encoder,
    head_r: Linear,
    head_cls: Linear,
}

impl<F: Real> Discriminator<F> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let init = config.init;
        let mut params = ParamStore::new();
        let embedding = params.init("embedding", config.vocab_size, config.embed_dim, init.embedding(), rng);
        let encoder = Encoder::new(&mut params, "encoder", config.encoder_shape(), init, rng);
        let head_r = Linear::new(&mut params, "head_r", config.embed_dim, 1, true, init, rng);
        let head_cls = Linear::new(&mut params, "head_cls", config.embed_dim, config.num_categories, true, init, rng);
        Ok(Discriminator {
            config,
            params,
            embedding,
            encoder,
            head_r,
            head_cls,
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<F>) -> Result<Self> {
        let fresh = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh.params, &params)?;
        Ok(Discriminator { params, ..fresh })
    }

    /// The `V×d` embedding matrix.
    pub fn embedding_table(&self) -> ParamId {
        self.embedding
    }

    /// Multiplies each row of `x` by the embedding matrix.
    pub fn embed_continuous(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (_, v) = g.shape(x);
        if v != self.config.vocab_size {
            return Err(Error::InvalidInput(format!(
                "input has {v} columns, vocabulary has {}",
                self.config.vocab_size
            )));
        }
        let values = g.value(x);
        if values.iter().any(|&p| p < F::zero()) {
            return Err(Error::InvalidInput("discriminator input has negative entries".into()));
        }
        if values.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("discriminator input".into()));
        }
        let table = g.param(&self.params, self.embedding);
        Ok(g.matmul(x, table))
    }

    /// Table-row lookup for discrete ids; equal to [`Self::embed_continuous`]
    /// on the one-hot encoding.
    pub fn embed_ids(&self, g: &mut Graph<F>, ids: &Array2<usize>) -> Result<Var> {
        let v = self.config.vocab_size;
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        let table = g.param(&self.params, self.embedding);
        let flat: Vec<usize> = ids.iter().copied().collect();
        Ok(g.gather_rows(table, &flat))
    }

    /// Scores `(B·T)×V` sentence rows.
    pub fn discriminate(&self, g: &mut Graph<F>, x: Var, batch: usize) -> Result<DiscriminatorVars> {
        let rows = g.shape(x).0;
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::InvalidInput(format!("{rows} rows do not split into {batch} sentences")));
        }
        let emb = self.embed_continuous(g, x)?;
        Ok(self.heads(g, emb, batch, rows / batch))
    }

    /// Scores discrete sentences through the lookup path.
    pub fn discriminate_ids(&self, g: &mut Graph<F>, batch: &Batch) -> Result<DiscriminatorVars> {
        let emb = self.embed_ids(g, &batch.ids)?;
        Ok(self.heads(g, emb, batch.size(), batch.max_len()))
    }

    /// Scores discrete sentences through the one-hot product path.
    pub fn discriminate_one_hot(&self, g: &mut Graph<F>, batch: &Batch) -> Result<DiscriminatorVars> {
        let x = g.leaf(one_hot(&batch.ids, self.config.vocab_size)?);
        self.discriminate(g, x, batch.size())
    }

    fn heads(&self, g: &mut Graph<F>, emb: Var, batch: usize, len: usize) -> DiscriminatorVars {
        let pe = g.leaf(batched_positions(batch, len, self.config.embed_dim));
        let h = g.add(emb, pe);
        let h = self.encoder.forward(g, &self.params, h, batch, len, None);
        let pool = g.leaf(mean_pool_matrix(None, batch, len));
        let pooled = g.matmul(pool, h);
        let r = self.head_r.forward(g, &self.params, pooled);
        let d_r = g.sigmoid(r);
        let cls = self.head_cls.forward(g, &self.params, pooled);
        let d_cls = g.softmax_rows(cls);
        DiscriminatorVars { d_r, d_cls }
    }

    /// Forward-only scoring of a plain `(B·T)×V` matrix.
    pub fn score(&self, x: &Array2<F>, batch: usize) -> Result<DiscriminatorOutput<F>> {
        let mut g = Graph::new();
        let x = g.leaf(x.clone());
        let out = self.discriminate(&mut g, x, batch)?;
        Ok(DiscriminatorOutput {
            d_r: g.value(out.d_r).iter().copied().collect(),
            d_cls: g.value(out.d_cls).clone(),
        })
    }
}
