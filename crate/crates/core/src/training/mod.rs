//! Pre-training and adversarial training of the generator/discriminator pair.

pub mod losses;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{one_hot, Batch, Dataset, Split};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::evaluation::bleu::BleuReference;
use crate::generator::{sample_gumbel, BetaSchedule, DecodeMode, GenerationContext, Generator};
use crate::optim::{Adam, AdamConfig};
use crate::seeding::{derive, Stream};

pub use losses::{
    adv_loss_d, adv_loss_g, cls_loss_d, cls_loss_g, cross_entropy, total_loss_d, total_loss_g, LossReport,
    LossWeights,
};

/// Validation-based early stopping for the adversarial loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Check every this many iterations.
    pub every: usize,
    /// Stop after this many checks without improvement.
    pub patience: usize,
    pub min_delta: f64,
    /// Generated sentences scored per check.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub g_steps: usize,
    pub d_steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Optimizer for both pre-training phases; falls back to `adam`.
    #[serde(default)]
    pub pretrain_adam: Option<AdamConfig>,
    pub pretrain_epochs_g: usize,
    pub pretrain_epochs_d: usize,
    pub adversarial_iterations: usize,
    #[serde(default = "default_flip")]
    pub label_flip_prob: f64,
    #[serde(default)]
    pub beta: BetaSchedule,
    #[serde(default)]
    pub weights: LossWeights,
    /// Not serialized: experiments derive it from their root seed.
    #[serde(skip)]
    pub seed: u64,
    /// Save a checkpoint every this many adversarial iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    /// Weight of the optional difference-quotient Lipschitz penalty on `D_r`;
    /// 0 disables it.
    #[serde(default)]
    pub lipschitz_penalty: f64,
}

fn default_flip() -> f64 {
    0.05
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            g_steps: 1,
            d_steps: 1,
            batch_size: 64,
            adam: AdamConfig::default(),
            pretrain_adam: None,
            pretrain_epochs_g: 50,
            pretrain_epochs_d: 5,
            adversarial_iterations: 2000,
            label_flip_prob: default_flip(),
            beta: BetaSchedule::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            early_stop: None,
            lipschitz_penalty: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("g_steps", self.g_steps),
            ("d_steps", self.d_steps),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("training.{name} must be ≥ 1")));
        }
        if !(0.0..0.5).contains(&self.label_flip_prob) {
            return Err(Error::Config(format!(
                "training.label_flip_prob must lie in [0, 0.5), got {}",
                self.label_flip_prob
            )));
        }
        for a in std::iter::once(&self.adam).chain(&self.pretrain_adam) {
            if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
                return Err(Error::Config(format!("invalid Adam settings: {a:?}")));
            }
        }
        if !(self.lipschitz_penalty >= 0.0) {
            return Err(Error::Config("training.lipschitz_penalty must be ≥ 0".into()));
        }
        if let Some(es) = &self.early_stop {
            if es.every == 0 || es.patience == 0 || es.samples == 0 {
                return Err(Error::Config("early_stop fields must be ≥ 1".into()));
            }
        }
        self.beta.validate()?;
        self.weights.validate()
    }

    pub fn pretrain_optimizer(&self) -> AdamConfig {
        self.pretrain_adam.unwrap_or(self.adam)
    }
}

/// Independent Bernoulli(p) flip decisions.
pub fn flip_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| p > 0.0 && rng.random::<f64>() < p).collect()
}

/// Swaps `t ↦ 1 − t` wherever the mask is set.
pub fn apply_flip(targets: &[f64], mask: &[bool]) -> Vec<f64> {
    targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { 1.0 - t } else { t })
        .collect()
}

/// Real/fake targets after independent per-example flips.
pub fn flip_labels<R: Rng + ?Sized>(real: &[f64], fake: &[f64], p: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let real_mask = flip_mask(real.len(), p, rng);
    let fake_mask = flip_mask(fake.len(), p, rng);
    (apply_flip(real, &real_mask), apply_flip(fake, &fake_mask))
}

/// Conditioning batch with uniformly drawn sources and categories.
pub fn sample_context<F: Real, R: Rng + ?Sized>(
    gen: &Generator<F>,
    data: &Dataset,
    split: Split,
    batch_size: usize,
    rng: &mut R,
) -> Result<GenerationContext<F>> {
    let source = data.sample_batch(split, batch_size, rng)?;
    let k = gen.config.num_categories;
    let target: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..k)).collect();
    Ok(GenerationContext::sample(source, target, gen.config.noise_dim, rng))
}

/// Self-reconstruction context: `s` is the sentence itself and `ĉ` its label.
fn reconstruction_context<F: Real, R: Rng + ?Sized>(gen: &Generator<F>, batch: &Batch, rng: &mut R) -> GenerationContext<F> {
    GenerationContext::sample(batch.clone(), batch.categories.clone(), gen.config.noise_dim, rng)
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_compatible<F: Real>(gen: &Generator<F>, data: &Dataset) -> Result<()> {
    let c = &gen.config;
    if c.vocab_size != data.vocab.len() || c.num_categories != data.num_categories || c.max_len != data.max_len {
        return Err(Error::Config(format!(
            "generator expects V={}, k={}, T={} but the dataset has V={}, k={}, T={}",
            c.vocab_size,
            c.num_categories,
            c.max_len,
            data.vocab.len(),
            data.num_categories,
            data.max_len
        )));
    }
    Ok(())
}

/// PAD-masked teacher-forced cross-entropy of `target` under self-conditioning.
pub fn reconstruction_loss<F: Real>(g: &mut Graph<F>, gen: &Generator<F>, ctx: &GenerationContext<F>) -> Result<Var> {
    let logits = gen.teacher_forced_logits(g, &ctx.source, ctx)?;
    losses::masked_nll_var(g, logits, &ctx.source.ids)
}

/// MLE pre-training of the generator. Returns the mean loss of every epoch.
pub fn pretrain_generator<F: Real>(gen: &mut Generator<F>, data: &Dataset, cfg: &TrainingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_compatible(gen, data)?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let mut adam = Adam::new(cfg.pretrain_optimizer(), &gen.params);
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs_g);
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs_g {
        let mut rng = derive(cfg.seed, Stream::PretrainGenerator, epoch as u64);
        let mut total = 0.0;
        let batches = shuffled_batches(data.train.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let batch = data.batch_of(idx.iter().map(|&i| &data.train[i]));
            let ctx = reconstruction_context(gen, &batch, &mut rng);
            let mut g = Graph::new();
            let loss = reconstruction_loss(&mut g, gen, &ctx)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("generator pre-training loss {value} in epoch {epoch}"),
                });
            }
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &gen.params);
            adam.step(&mut gen.params, &pg);
            total += value;
            step += 1;
        }
        curve.push(total / batches.len() as f64);
    }
    Ok(curve)
}

/// Relaxed generated rows as plain values, `(B·T)×V`.
fn relaxed_values<F: Real, R: Rng + ?Sized>(
    gen: &Generator<F>,
    ctx: &GenerationContext<F>,
    beta: f64,
    rng: &mut R,
) -> Result<Array2<F>> {
    let mut g = Graph::new();
    let out = gen.generate_relaxed_with_rng(&mut g, ctx, F::of(beta), rng)?;
    Ok(g.value(out.rows).clone())
}

/// Real-vs-fake plus category pre-training of the discriminator against
/// relaxed samples from `gen`. Returns the mean loss of every epoch.
pub fn pretrain_discriminator<F: Real>(
    disc: &mut Discriminator<F>,
    gen: &Generator<F>,
    data: &Dataset,
    cfg: &TrainingConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_compatible(gen, data)?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let mut adam = Adam::new(cfg.pretrain_optimizer(), &disc.params);
    let beta = cfg.beta.beta_at(0);
    let v = disc.config.vocab_size;
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs_d);
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs_d {
        let mut rng = derive(cfg.seed, Stream::PretrainDiscriminator, epoch as u64);
        let mut total = 0.0;
        let batches = shuffled_batches(data.train.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let real = data.batch_of(idx.iter().map(|&i| &data.train[i]));
            let b = real.size();
            let ctx = sample_context(gen, data, Split::Train, b, &mut rng)?;
            let fake = relaxed_values(gen, &ctx, beta, &mut rng)?;

            let mut g = Graph::new();
            let real_x = g.leaf(one_hot(&real.ids, v)?);
            let fake_x = g.leaf(fake);
            let both = g.concat_rows(&[real_x, fake_x]);
            let out = disc.discriminate(&mut g, both, 2 * b)?;
            let targets: Vec<F> = (0..2 * b).map(|i| if i < b { F::one() } else { F::zero() }).collect();
            let bce = losses::binary_cross_entropy_var(&mut g, out.d_r, &targets);
            let real_rows: Vec<usize> = (0..b).collect();
            let real_cls = g.gather_rows(out.d_cls, &real_rows);
            let cls = losses::cross_entropy_var(&mut g, real_cls, &real.categories)?;
            let bce = g.scale(bce, F::of(cfg.weights.adv));
            let cls = g.scale(cls, F::of(cfg.weights.cls));
            let loss = g.add(bce, cls);
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("discriminator pre-training loss {value} in epoch {epoch}"),
                });
            }
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &disc.params);
            adam.step(&mut disc.params, &pg);
            total += value;
            step += 1;
        }
        curve.push(total / batches.len() as f64);
    }
    Ok(curve)
}

/// Which network an inner step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Generator,
    Discriminator,
}

impl StepKind {
    pub fn tag(self) -> &'static str {
        match self {
            StepKind::Generator => "g",
            StepKind::Discriminator => "d",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub kind: StepKind,
    pub beta: f64,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "iteration\tstep\tl_adv_g\tl_cls_g\tl_g\tl_adv_d\tl_cls_d\tl_d\tbeta";

impl StepRecord {
    pub fn to_log_line(&self) -> String {
        let r = &self.report;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration,
            self.kind.tag(),
            r.l_adv_g,
            r.l_cls_g,
            r.l_g,
            r.l_adv_d,
            r.l_cls_d,
            r.l_d,
            self.beta
        )
    }
}

/// Fixed inputs of one generator update, so the objective is a pure
/// function of the parameters.
#[derive(Debug, Clone)]
pub struct GeneratorStepInputs<F: Real> {
    pub context: GenerationContext<F>,
    pub gumbel: Vec<Array2<F>>,
    pub real: Batch,
    pub beta: f64,
}

/// Fixed inputs of one discriminator update.
#[derive(Debug, Clone)]
pub struct DiscriminatorStepInputs<F: Real> {
    /// Relaxed generated rows, `(B·T)×V`.
    pub fake: Array2<F>,
    /// Categories the fakes were generated for.
    pub requested: Vec<usize>,
    pub real: Batch,
    /// Authenticity targets after flipping; 1 means "real".
    pub real_targets: Vec<f64>,
    pub fake_targets: Vec<f64>,
}

/// Builds `l_g` on `g`. Returns the root and the step's report; only the
/// generator's parameters should be updated from it.
pub fn generator_objective<F: Real>(
    g: &mut Graph<F>,
    gen: &Generator<F>,
    disc: &Discriminator<F>,
    inputs: &GeneratorStepInputs<F>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let b = inputs.context.batch_size();
    let fake = gen.generate_relaxed(g, &inputs.context, F::of(inputs.beta), &inputs.gumbel)?;
    let out = disc.discriminate(g, fake.rows, b)?;

    let mut real_graph = Graph::new();
    let real_out = disc.discriminate_ids(&mut real_graph, &inputs.real)?;
    let real_scores: Vec<f64> = real_graph.value(real_out.d_r).iter().map(|v| v.as_f64()).collect();
    let real_cls = real_graph.value(real_out.d_cls).mapv(|v| v.as_f64());
    let real_mean = real_scores.iter().sum::<f64>() / real_scores.len() as f64;

    let coef = vec![-F::one(); b];
    let neg_fake = losses::weighted_mean_var(g, out.d_r, &coef);
    let adv = g.affine(neg_fake, F::one(), F::of(real_mean));
    let cls = losses::cross_entropy_var(g, out.d_cls, &inputs.context.target)?;
    let adv_w = g.scale(adv, F::of(weights.adv));
    let cls_w = g.scale(cls, F::of(weights.cls));
    let root = g.add(adv_w, cls_w);

    let l_adv_g = g.scalar(adv).as_f64();
    let l_cls_g = g.scalar(cls).as_f64();
    let l_cls_d = cross_entropy(&real_cls, &inputs.real.categories)?;
    Ok((root, LossReport::new(weights, l_adv_g, l_cls_g, -l_adv_g, l_cls_d)))
}

/// Builds `l_d` (plus the optional Lipschitz penalty) on `g`.
pub fn discriminator_objective<F: Real>(
    g: &mut Graph<F>,
    disc: &Discriminator<F>,
    inputs: &DiscriminatorStepInputs<F>,
    weights: &LossWeights,
    lipschitz_penalty: f64,
) -> Result<(Var, LossReport)> {
    let b = inputs.real.size();
    if b == 0 || inputs.requested.len() != b || inputs.real_targets.len() != b || inputs.fake_targets.len() != b {
        return Err(Error::InvalidInput("discriminator step inputs disagree in batch size".into()));
    }
    let v = disc.config.vocab_size;
    let real_x = g.leaf(one_hot(&inputs.real.ids, v)?);
    let fake_x = g.leaf(inputs.fake.clone());
    let both = g.concat_rows(&[real_x, fake_x]);
    let out = disc.discriminate(g, both, 2 * b)?;

    // Target 1 pulls the score up, target 0 pushes it down.
    let coef: Vec<F> = inputs
        .real_targets
        .iter()
        .chain(&inputs.fake_targets)
        .map(|&t| F::of(2.0 * (1.0 - 2.0 * t)))
        .collect();
    // Averaging over 2B with doubled coefficients gives the two per-group means.
    let adv = losses::weighted_mean_var(g, out.d_r, &coef);
    let real_rows: Vec<usize> = (0..b).collect();
    let fake_rows: Vec<usize> = (b..2 * b).collect();
    let real_cls = g.gather_rows(out.d_cls, &real_rows);
    let cls = losses::cross_entropy_var(g, real_cls, &inputs.real.categories)?;
    let adv_w = g.scale(adv, F::of(weights.adv));
    let cls_w = g.scale(cls, F::of(weights.cls));
    let mut root = g.add(adv_w, cls_w);

    if lipschitz_penalty > 0.0 {
        let penalty = lipschitz_term(g, out.d_r, real_x, fake_x, b)?;
        let penalty = g.scale(penalty, F::of(lipschitz_penalty));
        root = g.add(root, penalty);
    }

    let fake_cls = g.value(out.d_cls).select(ndarray::Axis(0), &fake_rows).mapv(|v| v.as_f64());
    let l_adv_d = g.scalar(adv).as_f64();
    let l_cls_d = g.scalar(cls).as_f64();
    let l_cls_g = cross_entropy(&fake_cls, &inputs.requested)?;
    Ok((root, LossReport::new(weights, -l_adv_d, l_cls_g, l_adv_d, l_cls_d)))
}

/// `mean_i relu(|D_r(x_i) − D_r(x̂_i)| / ‖x_i − x̂_i‖ − 1)²`, a first-order
/// surrogate for a gradient-norm penalty.
fn lipschitz_term<F: Real>(
    g: &mut Graph<F>,
    d_r: Var,
    real_x: Var,
    fake_x: Var,
    b: usize,
) -> Result<Var> {
    let rows = g.shape(real_x).0;
    let len = rows / b;
    let real_rows: Vec<usize> = (0..b).collect();
    let fake_rows: Vec<usize> = (b..2 * b).collect();
    let dr = g.gather_rows(d_r, &real_rows);
    let df = g.gather_rows(d_r, &fake_rows);
    let diff_score = g.sub(dr, df);
    let diff_score = g.abs(diff_score);
    let dx = g.sub(real_x, fake_x);
    let sq = g.mul(dx, dx);
    let row_sums = g.sum_rows(sq);
    let mut group = Array2::zeros((b, rows));
    for i in 0..b {
        for t in 0..len {
            group[[i, i * len + t]] = F::one();
        }
    }
    let group = g.leaf(group);
    let norm_sq = g.matmul(group, row_sums);
    let norm_sq = g.affine(norm_sq, F::one(), F::of(1e-12));
    let norm = g.sqrt(norm_sq);
    let log_norm = g.log_clamped(norm, F::of(1e-12));
    let neg_log = g.scale(log_norm, -F::one());
    let inv = g.exp(neg_log);
    let ratio = g.mul(diff_score, inv);
    let excess = g.affine(ratio, F::one(), -F::one());
    let excess = g.relu(excess);
    let sq = g.mul(excess, excess);
    Ok(g.mean_all(sq))
}

/// Networks and optimizer state of an adversarial run.
#[derive(Debug, Clone)]
pub struct AdversarialState<F: Real> {
    pub generator: Generator<F>,
    pub discriminator: Discriminator<F>,
    pub optim_g: Adam<F>,
    pub optim_d: Adam<F>,
    /// Completed outer iterations.
    pub iteration: usize,
}

impl<F: Real> AdversarialState<F> {
    /// Fresh optimizer state around pre-trained networks.
    pub fn new(generator: Generator<F>, discriminator: Discriminator<F>, cfg: &TrainingConfig) -> Self {
        let optim_g = Adam::new(cfg.adam, &generator.params);
        let optim_d = Adam::new(cfg.adam, &discriminator.params);
        AdversarialState {
            generator,
            discriminator,
            optim_g,
            optim_d,
            iteration: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            iteration: self.iteration,
            generator: self.generator.clone(),
            discriminator: Some(self.discriminator.clone()),
            optim_g: Some(self.optim_g.clone()),
            optim_d: Some(self.optim_d.clone()),
        }
    }

    /// Resumes from a checkpoint; optimizer state is reset when absent.
    pub fn from_checkpoint(ckpt: Checkpoint<F>, cfg: &TrainingConfig) -> Result<Self> {
        let discriminator = ckpt
            .discriminator
            .ok_or_else(|| Error::Checkpoint("checkpoint has no discriminator".into()))?;
        let optim_g = ckpt.optim_g.unwrap_or_else(|| Adam::new(cfg.adam, &ckpt.generator.params));
        let optim_d = ckpt.optim_d.unwrap_or_else(|| Adam::new(cfg.adam, &discriminator.params));
        Ok(AdversarialState {
            generator: ckpt.generator,
            discriminator,
            optim_g,
            optim_d,
            iteration: ckpt.iteration,
        })
    }

    /// Draws the inputs of a generator update.
    pub fn generator_inputs<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        batch_size: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<GeneratorStepInputs<F>> {
        let gen = &self.generator;
        let context = sample_context(gen, data, Split::Train, batch_size, rng)?;
        let gumbel = (0..gen.config.max_len - 1)
            .map(|_| sample_gumbel(batch_size, gen.config.vocab_size, rng))
            .collect();
        let real = data.sample_batch(Split::Train, batch_size, rng)?;
        Ok(GeneratorStepInputs {
            context,
            gumbel,
            real,
            beta,
        })
    }

    /// Draws the inputs of a discriminator update, flipping labels with
    /// probability `flip`.
    pub fn discriminator_inputs<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        batch_size: usize,
        beta: f64,
        flip: f64,
        rng: &mut R,
    ) -> Result<DiscriminatorStepInputs<F>> {
        let ctx = sample_context(&self.generator, data, Split::Train, batch_size, rng)?;
        let fake = relaxed_values(&self.generator, &ctx, beta, rng)?;
        let real = data.sample_batch(Split::Train, batch_size, rng)?;
        let (real_targets, fake_targets) = flip_labels(&vec![1.0; batch_size], &vec![0.0; batch_size], flip, rng);
        Ok(DiscriminatorStepInputs {
            fake,
            requested: ctx.target,
            real,
            real_targets,
            fake_targets,
        })
    }

    pub fn generator_step(&mut self, inputs: &GeneratorStepInputs<F>, weights: &LossWeights) -> Result<LossReport> {
        let mut g = Graph::new();
        let (root, report) = generator_objective(&mut g, &self.generator, &self.discriminator, inputs, weights)?;
        if report.is_finite() {
            let grads = g.backward(root);
            let grads = g.param_grads(&grads, &self.generator.params);
            self.optim_g.step(&mut self.generator.params, &grads);
        }
        Ok(report)
    }

    pub fn discriminator_step(
        &mut self,
        inputs: &DiscriminatorStepInputs<F>,
        weights: &LossWeights,
        lipschitz_penalty: f64,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let (root, report) = discriminator_objective(&mut g, &self.discriminator, inputs, weights, lipschitz_penalty)?;
        if report.is_finite() {
            let grads = g.backward(root);
            let grads = g.param_grads(&grads, &self.discriminator.params);
            self.optim_d.step(&mut self.discriminator.params, &grads);
        }
        Ok(report)
    }
}

/// Where the adversarial loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    /// Tab-separated per-step loss log.
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Result of [`adversarial_train`].
#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub history: Vec<StepRecord>,
    /// Set when early stopping ended the run before the budget.
    pub stopped_early_at: Option<usize>,
}

/// Checkpoint file written after `iteration` completed iterations.
pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter_{iteration:06}.ckpt"))
}

/// Runs outer iterations `state.iteration .. cfg.adversarial_iterations`.
/// Every random draw comes from a stream keyed by the iteration, so a run
/// resumed from a checkpoint continues exactly where it left off.
pub fn adversarial_train<F: Real>(
    state: &mut AdversarialState<F>,
    data: &Dataset,
    cfg: &TrainingConfig,
    outputs: &RunOutputs,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    check_compatible(&state.generator, data)?;
    let mut log = match &outputs.log {
        Some(path) => Some(open_log(path, state.iteration)?),
        None => None,
    };
    let mut early = EarlyStopTracker::new(cfg.early_stop, data)?;
    let mut history = Vec::new();
    let mut stopped_early_at = None;
    let inner = cfg.g_steps + cfg.d_steps;
    while state.iteration < cfg.adversarial_iterations {
        let it = state.iteration;
        let beta = cfg.beta.beta_at(it);
        for step in 0..inner {
            let mut rng = derive(cfg.seed, Stream::Adversarial, (it * inner + step) as u64);
            let (kind, report) = if step < cfg.g_steps {
                let inputs = state.generator_inputs(data, cfg.batch_size, beta, &mut rng)?;
                (StepKind::Generator, state.generator_step(&inputs, &cfg.weights)?)
            } else {
                let inputs = state.discriminator_inputs(data, cfg.batch_size, beta, cfg.label_flip_prob, &mut rng)?;
                (
                    StepKind::Discriminator,
                    state.discriminator_step(&inputs, &cfg.weights, cfg.lipschitz_penalty)?,
                )
            };
            let record = StepRecord {
                iteration: it,
                kind,
                beta,
                report,
            };
            if let Some((path, w)) = log.as_mut() {
                writeln!(w, "{}", record.to_log_line()).map_err(|e| Error::io(path.clone(), e))?;
            }
            if !report.is_finite() {
                if let Some((path, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(path.clone(), e))?;
                }
                return Err(Error::AdversarialDiverged { iteration: it, report });
            }
            history.push(record);
        }
        state.iteration += 1;
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
                state.to_checkpoint().save(&checkpoint_path(dir, state.iteration))?;
            }
        }
        if early.should_stop(state, data, cfg)? {
            stopped_early_at = Some(state.iteration);
            break;
        }
    }
    if let Some((path, w)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(AdversarialOutcome {
        history,
        stopped_early_at,
    })
}

/// Opens the step log. When resuming from `resume_at` completed
/// iterations, records of later iterations (left by an interrupted run) are
/// dropped so the curve continues without duplicates.
fn open_log(path: &Path, resume_at: usize) -> Result<(PathBuf, BufWriter<File>)> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut kept = String::new();
    if resume_at > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let it = line.split('\t').next().and_then(|f| f.parse::<usize>().ok());
            if it.is_some_and(|it| it < resume_at) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "{LOG_HEADER}\n{kept}").map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), w))
}

struct EarlyStopTracker {
    cfg: Option<EarlyStop>,
    reference: Option<BleuReference>,
    best: f64,
    stale: usize,
}

impl EarlyStopTracker {
    fn new(cfg: Option<EarlyStop>, data: &Dataset) -> Result<Self> {
        let reference = match cfg {
            Some(_) => {
                if data.valid.is_empty() {
                    return Err(Error::EmptySplit(Split::Valid.to_string()));
                }
                let refs: Vec<Vec<String>> = data.valid.iter().map(|s| s.tokens.clone()).collect();
                Some(BleuReference::new(&refs, 2)?)
            }
            None => None,
        };
        Ok(EarlyStopTracker {
            cfg,
            reference,
            best: f64::NEG_INFINITY,
            stale: 0,
        })
    }

    fn should_stop<F: Real>(&mut self, state: &AdversarialState<F>, data: &Dataset, train: &TrainingConfig) -> Result<bool> {
        let (Some(cfg), Some(reference)) = (self.cfg, &self.reference) else {
            return Ok(false);
        };
        if !state.iteration.is_multiple_of(cfg.every) {
            return Ok(false);
        }
        let mut rng = derive(train.seed, Stream::EarlyStop, state.iteration as u64);
        let mut hyps = Vec::with_capacity(cfg.samples);
        while hyps.len() < cfg.samples {
            let b = (cfg.samples - hyps.len()).min(train.batch_size);
            let ctx = sample_context(&state.generator, data, Split::Valid, b, &mut rng)?;
            let out = state.generator.generate_discrete(&ctx, DecodeMode::Sample, &mut rng)?;
            for row in out.ids.rows() {
                hyps.push(data.vocab.decode(&row.to_vec())?);
            }
        }
        let score = reference.corpus_score(&hyps)?;
        if score > self.best + cfg.min_delta {
            self.best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(self.stale >= cfg.patience)
    }
}

#[cfg(test)]
mod tests;
