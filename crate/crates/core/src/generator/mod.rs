//! Sequence-to-sequence generator conditioned on a source sentence and a
//! target category.
//!
//! The encoder side is a shared word-embedding table, a transformer feature
//! encoder over the conditioning sentence (mean-pooled to one vector per
//! sentence) and a category embedding table. The decoder is a relational
//! memory core seeded from noise; at every step it consumes
//! `[sentence features ‖ previous word embedding ‖ category embedding]` and
//! emits logits over the vocabulary.
//!
//! Sequences are `max_len` positions long with BOS at position 0, so the
//! decoder runs `max_len − 1` steps. Relaxed sequences are laid out
//! `(B·T)×V`, row `b·T + t`.

pub mod gumbel;
pub mod rmc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Graph, ParamId, ParamStore, Real, Var};
use crate::corpus::{Batch, BOS};
use crate::error::{Error, Result};
use crate::nn::{batched_positions, mean_pool_matrix, Encoder, EncoderShape, InitScheme};

pub use gumbel::{gumbel_softmax, sample_gumbel, BetaSchedule};
pub use rmc::{gated_update, RelationalMemory, RmcShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub cat_embed_dim: usize,
    pub n_encoder_layers: usize,
    pub n_attn_heads: usize,
    pub attn_hidden: usize,
    pub ffn_hidden: usize,
    pub rmc_slots: usize,
    pub rmc_heads: usize,
    pub rmc_head_size: usize,
    pub noise_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_categories: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl GeneratorConfig {
    /// Published model dimensions for a corpus of the given shape.
    pub fn full_size(vocab_size: usize, num_categories: usize, max_len: usize) -> Self {
        GeneratorConfig {
            embed_dim: 64,
            cat_embed_dim: 32,
            n_encoder_layers: 2,
            n_attn_heads: 2,
            attn_hidden: 64,
            ffn_hidden: 256,
            rmc_slots: 2,
            rmc_heads: 2,
            rmc_head_size: 256,
            noise_dim: 64,
            max_len,
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

    pub fn rmc_shape(&self) -> RmcShape {
        RmcShape {
            input_dim: 2 * self.embed_dim + self.cat_embed_dim,
            slots: self.rmc_slots,
            heads: self.rmc_heads,
            head_size: self.rmc_head_size,
            noise_dim: self.noise_dim,
            output_dim: self.vocab_size,
        }
    }

    pub fn slot_dim(&self) -> usize {
        self.rmc_heads * self.rmc_head_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_shape().validate("generator").map_err(Error::Config)?;
        let dims = [
            ("embed_dim", self.embed_dim),
            ("cat_embed_dim", self.cat_embed_dim),
            ("rmc_slots", self.rmc_slots),
            ("rmc_heads", self.rmc_heads),
            ("rmc_head_size", self.rmc_head_size),
            ("noise_dim", self.noise_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be ≥ 1")));
        }
        if self.max_len < 3 {
            return Err(Error::Config("generator.max_len must be ≥ 3".into()));
        }
        if self.vocab_size < crate::corpus::NUM_SPECIAL {
            return Err(Error::Config("generator.vocab_size must be ≥ 4".into()));
        }
        if self.num_categories < 2 {
            return Err(Error::Config("generator.num_categories must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Conditioning for one batch of generation: source sentences, requested
/// categories and prior noise.
#[derive(Debug, Clone)]
pub struct GenerationContext<F: Real> {
    pub source: Batch,
    pub target: Vec<usize>,
    pub noise: Array2<F>,
}

impl<F: Real> GenerationContext<F> {
    /// Draws `z ~ N(0, I)` for the given source and targets.
    pub fn sample<R: Rng + ?Sized>(source: Batch, target: Vec<usize>, noise_dim: usize, rng: &mut R) -> Self {
        let noise = sample_noise(target.len(), noise_dim, rng);
        GenerationContext {
            source,
            target,
            noise,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.target.len()
    }
}

pub fn sample_noise<F: Real, R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, dim), || {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Multinomial draw from `softmax(o_t)`.
    Sample,
    Argmax,
}

/// Tape handles for one relaxed generation.
#[derive(Debug, Clone)]
pub struct RelaxedOutput {
    /// `(B·T)×V` probability rows, BOS one-hot at every `t = 0`.
    pub rows: Var,
    /// Per-step `B×V` logits `o_t`, `T − 1` of them.
    pub logits: Vec<Var>,
    /// Per-step relaxed rows `x̂_{t+1}`.
    pub steps: Vec<Var>,
}

/// Discrete sentences with the log-probability of each committed token.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSample<F: Real> {
    /// `B×T` ids, BOS in column 0.
    pub ids: Array2<usize>,
    /// `B×(T−1)`: `log softmax(o_t)[chosen]` for each generated position.
    pub log_probs: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Generator<F: Real> {
    pub config: GeneratorConfig,
    pub params: ParamStore<F>,
    embedding: ParamId,
    cat_table: ParamId,
    feat_enc: Encoder,
    rmc: RelationalMemory,
}

impl<F: Real> Generator<F> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let init = config.init;
        let mut params = ParamStore::new();
        let embedding = params.init(
            "embedding",
            config.vocab_size,
            config.embed_dim,
            init.embedding(),
            rng,
        );
        let cat_table = params.init(
            "cat_embedding",
            config.num_categories,
            config.cat_embed_dim,
            init.embedding(),
            rng,
        );
        let feat_enc = Encoder::new(&mut params, "feat_enc", config.encoder_shape(), init, rng);
        let rmc = RelationalMemory::new(&mut params, "rmc", config.rmc_shape(), init, rng);
        Ok(Generator {
            config,
            params,
            embedding,
            cat_table,
            feat_enc,
            rmc,
        })
    }

    /// Rebuilds the network skeleton around loaded parameters.
    pub fn from_params(config: GeneratorConfig, params: ParamStore<F>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = Self::new(config, &mut rng)?;
        check_layout(&fresh.params, &params)?;
        Ok(Generator { params, ..fresh })
    }

    pub fn embedding_table(&self) -> ParamId {
        self.embedding
    }

    pub fn category_table(&self) -> ParamId {
        self.cat_table
    }

    pub fn rmc(&self) -> &RelationalMemory {
        &self.rmc
    }

    /// Parameter-name prefixes of the generator's submodules.
    pub fn submodules() -> &'static [&'static str] {
        &["embedding", "cat_embedding", "feat_enc.", "rmc."]
    }

    /// Mean-pooled transformer features of the source sentences, `B×d_w`.
    pub fn feat_encode(&self, g: &mut Graph<F>, source: &Batch) -> Result<Var> {
        self.check_ids(source)?;
        let (batch, len) = (source.size(), source.max_len());
        let table = g.param(&self.params, self.embedding);
        let flat: Vec<usize> = source.ids.iter().copied().collect();
        let emb = g.gather_rows(table, &flat);
        let pe = g.leaf(batched_positions(batch, len, self.config.embed_dim));
        let x = g.add(emb, pe);
        let valid = source.valid_mask();
        let h = self.feat_enc.forward(g, &self.params, x, batch, len, Some(&valid));
        let pool = g.leaf(mean_pool_matrix(Some(&valid), batch, len));
        Ok(g.matmul(pool, h))
    }

    /// Rows of the category table, `B×d_c`.
    pub fn cat_encode(&self, g: &mut Graph<F>, categories: &[usize]) -> Result<Var> {
        let k = self.config.num_categories;
        if let Some(&c) = categories.iter().find(|&&c| c >= k) {
            return Err(Error::CategoryOutOfRange { category: c, k });
        }
        let table = g.param(&self.params, self.cat_table);
        Ok(g.gather_rows(table, categories))
    }

    pub fn init_state(&self, g: &mut Graph<F>, noise: Var) -> Var {
        self.rmc.init_state(g, &self.params, noise)
    }

    pub fn rmc_step(&self, g: &mut Graph<F>, memory: Var, input: Var) -> (Var, Var) {
        self.rmc.step(g, &self.params, memory, input)
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        match batch.ids.iter().find(|&&id| id >= v) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: v }),
            None => Ok(()),
        }
    }

    fn check_context(&self, ctx: &GenerationContext<F>) -> Result<()> {
        let b = ctx.batch_size();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if ctx.source.size() != b {
            return Err(Error::InvalidInput(format!(
                "{} source sentences for {b} targets",
                ctx.source.size()
            )));
        }
        if ctx.source.max_len() != self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "source length {} differs from max_len {}",
                ctx.source.max_len(),
                self.config.max_len
            )));
        }
        if ctx.noise.dim() != (b, self.config.noise_dim) {
            return Err(Error::InvalidInput(format!(
                "noise shape {:?}, expected ({b}, {})",
                ctx.noise.dim(),
                self.config.noise_dim
            )));
        }
        if ctx.noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generation noise".into()));
        }
        Ok(())
    }

    /// Encodes the context once: `(features, category embedding, memory)`.
    fn encode_context(&self, g: &mut Graph<F>, ctx: &GenerationContext<F>) -> Result<(Var, Var, Var)> {
        self.check_context(ctx)?;
        let feat = self.feat_encode(g, &ctx.source)?;
        let cat = self.cat_encode(g, &ctx.target)?;
        let z = g.leaf(ctx.noise.clone());
        let memory = self.init_state(g, z);
        Ok((feat, cat, memory))
    }

    fn bos_embedding(&self, g: &mut Graph<F>, batch: usize) -> Var {
        let table = g.param(&self.params, self.embedding);
        g.gather_rows(table, &vec![BOS; batch])
    }

    /// Relaxed generation with caller-supplied Gumbel noise, one `B×V`
    /// matrix per decoding step. The previous word is fed back as the
    /// relaxed row times the shared embedding table.
    pub fn generate_relaxed(
        &self,
        g: &mut Graph<F>,
        ctx: &GenerationContext<F>,
        beta: F,
        gumbel: &[Array2<F>],
    ) -> Result<RelaxedOutput> {
        let steps = self.config.max_len - 1;
        let (b, v) = (ctx.batch_size(), self.config.vocab_size);
        if gumbel.len() != steps || gumbel.iter().any(|n| n.dim() != (b, v)) {
            return Err(Error::InvalidInput(format!(
                "expected {steps} Gumbel matrices of shape ({b}, {v})"
            )));
        }
        if !(beta > F::zero()) {
            return Err(Error::InvalidInput(format!("β must be > 0, got {beta}")));
        }
        let (feat, cat, mut memory) = self.encode_context(g, ctx)?;
        let table = g.param(&self.params, self.embedding);
        let mut prev = self.bos_embedding(g, b);
        let mut logits = Vec::with_capacity(steps);
        let mut rows = Vec::with_capacity(steps);
        for noise in gumbel {
            let input = g.concat_cols(&[feat, prev, cat]);
            let (next, o_t) = self.rmc_step(g, memory, input);
            memory = next;
            let x_hat = gumbel::gumbel_softmax_var(g, o_t, beta, noise.clone());
            prev = g.matmul(x_hat, table);
            logits.push(o_t);
            rows.push(x_hat);
        }
        let mut bos = Array2::zeros((b, v));
        bos.column_mut(BOS).fill(F::one());
        let bos = g.leaf(bos);
        let mut parts = vec![bos];
        parts.extend(&rows);
        let step_major = g.concat_rows(&parts);
        let len = self.config.max_len;
        let index: Vec<usize> = (0..b).flat_map(|r| (0..len).map(move |t| t * b + r)).collect();
        let sequence = g.gather_rows(step_major, &index);
        Ok(RelaxedOutput {
            rows: sequence,
            logits,
            steps: rows,
        })
    }

    /// Draws fresh Gumbel noise and runs [`Generator::generate_relaxed`].
    pub fn generate_relaxed_with_rng<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        ctx: &GenerationContext<F>,
        beta: F,
        rng: &mut R,
    ) -> Result<RelaxedOutput> {
        let noise: Vec<Array2<F>> = (0..self.config.max_len - 1)
            .map(|_| sample_gumbel(ctx.batch_size(), self.config.vocab_size, rng))
            .collect();
        self.generate_relaxed(g, ctx, beta, &noise)
    }

    /// Token-by-token generation committing a discrete word at each step.
    pub fn generate_discrete<R: Rng + ?Sized>(
        &self,
        ctx: &GenerationContext<F>,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<DiscreteSample<F>> {
        let mut g = Graph::new();
        let (feat, cat, mut memory) = self.encode_context(&mut g, ctx)?;
        let table = g.param(&self.params, self.embedding);
        let b = ctx.batch_size();
        let len = self.config.max_len;
        let mut ids = Array2::zeros((b, len));
        ids.column_mut(0).fill(BOS);
        let mut log_probs = Array2::zeros((b, len - 1));
        let mut prev = self.bos_embedding(&mut g, b);
        for t in 0..len - 1 {
            let input = g.concat_cols(&[feat, prev, cat]);
            let (next, o_t) = self.rmc_step(&mut g, memory, input);
            memory = next;
            let logp = log_softmax_rows(g.value(o_t));
            if logp.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!("logits at step {t}")));
            }
            let mut chosen = Vec::with_capacity(b);
            for (r, row) in logp.rows().into_iter().enumerate() {
                let id = match mode {
                    DecodeMode::Argmax => argmax(row.iter().copied()),
                    DecodeMode::Sample => sample_categorical(row.iter().map(|lp| lp.exp()), rng),
                };
                ids[[r, t + 1]] = id;
                log_probs[[r, t]] = row[id];
                chosen.push(id);
            }
            prev = g.gather_rows(table, &chosen);
        }
        Ok(DiscreteSample { ids, log_probs })
    }

    /// Teacher-forced next-token logits, `(B·(T−1))×V` with row `b·(T−1) + t`
    /// predicting `target[b, t + 1]` from `target[b, ..=t]`.
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph<F>,
        target: &Batch,
        ctx: &GenerationContext<F>,
    ) -> Result<Var> {
        self.check_ids(target)?;
        if target.size() != ctx.batch_size() || target.max_len() != self.config.max_len {
            return Err(Error::InvalidInput("target batch does not match context".into()));
        }
        let (feat, cat, mut memory) = self.encode_context(g, ctx)?;
        let table = g.param(&self.params, self.embedding);
        let b = ctx.batch_size();
        let steps = self.config.max_len - 1;
        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<usize> = target.ids.column(t).to_vec();
            let prev = g.gather_rows(table, &col);
            let input = g.concat_cols(&[feat, prev, cat]);
            let (next, o_t) = self.rmc_step(g, memory, input);
            memory = next;
            logits.push(o_t);
        }
        let step_major = g.concat_rows(&logits);
        let index: Vec<usize> = (0..b).flat_map(|r| (0..steps).map(move |t| t * b + r)).collect();
        Ok(g.gather_rows(step_major, &index))
    }
}

/// Verifies that loaded parameters match the freshly built layout.
pub(crate) fn check_layout<F: Real>(expected: &ParamStore<F>, got: &ParamStore<F>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for id in expected.ids() {
        if expected.name(id) != got.name(id) || expected.get(id).dim() != got.get(id).dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {} mismatch: expected `{}` {:?}, found `{}` {:?}",
                id.index(),
                expected.name(id),
                expected.get(id).dim(),
                got.name(id),
                got.get(id).dim()
            )));
        }
    }
    Ok(())
}

pub(crate) fn argmax<F: Real>(values: impl Iterator<Item = F>) -> usize {
    let mut best = (0, F::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Inverse-CDF draw from (possibly unnormalized) non-negative weights.
pub(crate) fn sample_categorical<F: Real, R: Rng + ?Sized>(weights: impl Iterator<Item = F> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().map(|w| w.as_f64()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        let w = w.as_f64();
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}
