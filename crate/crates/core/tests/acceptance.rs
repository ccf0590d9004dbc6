//! Acceptance checks. Runs without the libtest harness so that every check
//! prints exactly one PASS/FAIL line; the process fails if any check fails.

use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fagan::autograd::{log_softmax_rows, Graph, ParamStore, Real};
use fagan::checkpoint::Checkpoint;
use fagan::corpus::{one_hot, Batch, Dataset, Split, BOS, EOS, PAD};
use fagan::discriminator::{Discriminator, DiscriminatorConfig};
use fagan::evaluation::bleu::{bleu_n, BleuConfig};
use fagan::evaluation::{
    augmentation_eval, evaluate_generator, nll_div, per_token_nll, AugmentationConfig, ClassifierConfig, CopySource,
    EvaluationConfig, LabelCorruptingSource,
};
use fagan::generator::{gumbel_softmax, sample_gumbel, BetaSchedule, GenerationContext, Generator, GeneratorConfig};
use fagan::nn::InitScheme;
use fagan::optim::{Adam, AdamConfig};
use fagan::seeding::{derive, Stream};
use fagan::synthetic::ToyGrammar;
use fagan::training::losses::{self, masked_nll_var};
use fagan::training::{
    adv_loss_d, adv_loss_g, cls_loss_d, cls_loss_g, discriminator_objective, generator_objective, pretrain_discriminator,
    pretrain_generator, sample_context, total_loss_d, total_loss_g, adversarial_train, AdversarialState,
    DiscriminatorStepInputs, GeneratorStepInputs, LossWeights, RunOutputs, TrainingConfig,
};

// Tolerances and budgets.
const LOSS_TOL: f64 = 1e-9;
const LOSS_TRIALS: usize = 200;
const LOSS_BUDGET: Duration = Duration::from_secs(1);
const SIMPLEX_TOL: f64 = 1e-5;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const GUMBEL_MEAN_TOL: f64 = 0.01;
const GUMBEL_DRAWS: usize = 1_000_000;
const GUMBEL_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL_F32: f64 = 1e-3;
const GRAD_TOL_F64: f64 = 1e-5;
/// Denominator floors of the relative error. Entries below the floor are
/// effectively compared in absolute terms, since rounding noise in the
/// analytic f32 gradient (about 1e-8 here) or in the difference quotient
/// (about 1e-12) cannot resolve them to the tolerance.
const GRAD_FLOOR_F32: f64 = 1e-4;
const GRAD_FLOOR_F64: f64 = 1e-6;
/// Step of the fourth-order central difference.
const FD_STEP: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const NLL_TOL: f64 = 0.01;
const NLL_SAMPLES: usize = 100_000;
const NLL_BUDGET: Duration = Duration::from_secs(60);
// Both sides sum the same logs in the same order, so agreement is exact.
const BLEU_TOL: f64 = 0.0;
const BLEU_TRIALS: usize = 50;
const FIDELITY_MIN: f64 = 0.90;
const NLL_GAP_MIN: f64 = 0.5;
const TOY_ITERATIONS: usize = 2000;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const AUG_ALPHA: f64 = 0.05;
const AUG_RUNS: usize = 10;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.2?}, budget {budget:.0?}"))
}

fn random_probs(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut p = Array2::from_shape_simple_fn((rows, k), || rng.random::<f64>() + 1e-3);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

// ---------------------------------------------------------------------------
// 1. Loss formulas

fn oracle_mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

fn oracle_ce(p: &Array2<f64>, t: &[usize]) -> f64 {
    let mut s = 0.0;
    for (r, &c) in t.iter().enumerate() {
        s -= p[[r, c]].max(1e-12).ln();
    }
    s / t.len() as f64
}

fn tiny_generator_config(v: usize, k: usize, t: usize) -> GeneratorConfig {
    GeneratorConfig {
        embed_dim: 8,
        cat_embed_dim: 4,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: 8,
        ffn_hidden: 16,
        rmc_slots: 2,
        rmc_heads: 2,
        rmc_head_size: 4,
        noise_dim: 4,
        max_len: t,
        vocab_size: v,
        num_categories: k,
        init: InitScheme::Xavier,
    }
}

fn tiny_discriminator_config(v: usize, k: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        embed_dim: 8,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: 8,
        ffn_hidden: 16,
        vocab_size: v,
        num_categories: k,
        init: InitScheme::Xavier,
    }
}

fn random_ids(b: usize, t: usize, v: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut ids = Array2::from_elem((b, t), PAD);
    let mut cats = Vec::with_capacity(b);
    for r in 0..b {
        ids[[r, 0]] = BOS;
        let len = rng.random_range(1..=t - 2);
        for c in 1..=len {
            ids[[r, c]] = rng.random_range(4..v);
        }
        ids[[r, len + 1]] = EOS;
        cats.push(rng.random_range(0..2));
    }
    Batch::from_ids(ids, cats)
}

fn loss_formulas() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..LOSS_TRIALS {
        let b = rng.random_range(1..=8);
        let k = rng.random_range(2..=5);
        let fake: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let real: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let p_fake = random_probs(b, k, &mut rng);
        let p_real = random_probs(b, k, &mut rng);
        let requested: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let w = LossWeights {
            adv: rng.random_range(0.0..2.0),
            cls: rng.random_range(0.0..2.0),
        };

        let g = adv_loss_g(&fake, &real).unwrap();
        let d = adv_loss_d(&fake, &real).unwrap();
        ensure(g == -d, || format!("antisymmetry broken: {g} vs {d}"))?;
        let cg = cls_loss_g(&p_fake, &requested).unwrap();
        let cd = cls_loss_d(&p_real, &labels).unwrap();
        let pairs = [
            (g, oracle_mean(&real) - oracle_mean(&fake)),
            (d, oracle_mean(&fake) - oracle_mean(&real)),
            (cg, oracle_ce(&p_fake, &requested)),
            (cd, oracle_ce(&p_real, &labels)),
            (total_loss_g(g, cg, &w), w.adv * (oracle_mean(&real) - oracle_mean(&fake)) + w.cls * oracle_ce(&p_fake, &requested)),
            (total_loss_d(d, cd, &w), w.adv * (oracle_mean(&fake) - oracle_mean(&real)) + w.cls * oracle_ce(&p_real, &labels)),
        ];

        // Tape versions used by the optimizers.
        let mut tape = Graph::<f64>::new();
        let col = tape.leaf(Array2::from_shape_vec((b, 1), fake.clone()).unwrap());
        let neg = losses::weighted_mean_var(&mut tape, col, &vec![-1.0; b]);
        let probs = tape.leaf(p_fake.clone());
        let ce = losses::cross_entropy_var(&mut tape, probs, &requested).unwrap();
        let tape_pairs = [(tape.scalar(neg), -oracle_mean(&fake)), (tape.scalar(ce), oracle_ce(&p_fake, &requested))];

        for (got, want) in pairs.iter().chain(&tape_pairs) {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= LOSS_TOL, || format!("max abs error {worst:e} > {LOSS_TOL:e}"))?;

    // The reports of both training objectives agree with the plain formulas.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v, k, t, b) = (8, 2, 5, 3);
    let gen = Generator::<f64>::new(tiny_generator_config(v, k, t), &mut rng).unwrap();
    let disc = Discriminator::<f64>::new(tiny_discriminator_config(v, k), &mut rng).unwrap();
    let real = random_ids(b, t, v, &mut rng);
    let ctx = GenerationContext::sample(random_ids(b, t, v, &mut rng), vec![0, 1, 1], 4, &mut rng);
    let gumbel: Vec<Array2<f64>> = (0..t - 1).map(|_| sample_gumbel(b, v, &mut rng)).collect();
    let weights = LossWeights { adv: 0.7, cls: 1.3 };
    let inputs = GeneratorStepInputs { context: ctx.clone(), gumbel: gumbel.clone(), real: real.clone(), beta: 2.0 };
    let (_, rep_g) = generator_objective(&mut Graph::new(), &gen, &disc, &inputs, &weights).unwrap();
    let mut g = Graph::new();
    let fake = gen.generate_relaxed(&mut g, &ctx, 2.0, &gumbel).unwrap();
    let fake = g.value(fake.rows).clone();
    let fake_out = disc.score(&fake, b).unwrap();
    let real_out = disc.score(&one_hot::<f64>(&real.ids, v).unwrap(), b).unwrap();
    let want_g = adv_loss_g(&fake_out.d_r, &real_out.d_r).unwrap();
    let want_cls_g = cls_loss_g(&fake_out.d_cls, &ctx.target).unwrap();
    let want_cls_d = cls_loss_d(&real_out.d_cls, &real.categories).unwrap();
    let d_inputs = DiscriminatorStepInputs {
        fake,
        requested: ctx.target.clone(),
        real: real.clone(),
        real_targets: vec![1.0; b],
        fake_targets: vec![0.0; b],
    };
    let (_, rep_d) = discriminator_objective(&mut Graph::new(), &disc, &d_inputs, &weights, 0.0).unwrap();
    let checks = [
        (rep_g.l_adv_g, want_g),
        (rep_g.l_cls_g, want_cls_g),
        (rep_g.l_g, total_loss_g(want_g, want_cls_g, &weights)),
        (rep_d.l_adv_d, -want_g),
        (rep_d.l_cls_d, want_cls_d),
        (rep_d.l_d, total_loss_d(-want_g, want_cls_d, &weights)),
    ];
    for (i, (got, want)) in checks.iter().enumerate() {
        ensure((got - want).abs() <= LOSS_TOL, || format!("objective term {i}: {got} vs {want}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, LOSS_BUDGET)?;
    Ok(format!("{LOSS_TRIALS} random cases, max error {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. Gumbel-softmax

fn gumbel_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let betas = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0];
    for _ in 0..50 {
        let (b, v) = (rng.random_range(1..6), rng.random_range(2..30));
        let logits = Array2::from_shape_simple_fn((b, v), || rng.random_range(-5.0..5.0));
        let noise: Array2<f64> = sample_gumbel(b, v, &mut rng);
        let mut prev_max = vec![0.0; b];
        for &beta in &betas {
            let y = gumbel_softmax(&logits, beta, &noise).unwrap();
            for (r, row) in y.rows().into_iter().enumerate() {
                ensure(row.iter().all(|&p| p >= 0.0), || "negative probability".into())?;
                ensure((row.sum() - 1.0).abs() <= SIMPLEX_TOL, || format!("row sums to {}", row.sum()))?;
                let m = row.iter().copied().fold(0.0, f64::max);
                ensure(m >= prev_max[r] - 1e-12, || format!("max entry fell from {} to {m} at β={beta}", prev_max[r]))?;
                prev_max[r] = m;
            }
        }
        let zero = Array2::zeros((b, v));
        let y = gumbel_softmax(&logits, 100.0, &zero).unwrap();
        for (lrow, yrow) in logits.rows().into_iter().zip(y.rows()) {
            let am = |it: ndarray::ArrayView1<f64>| {
                it.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            ensure(am(lrow) == am(yrow), || "β=100 argmax disagrees with the logits".into())?;
        }
    }

    // Relaxed generator rows stay on the simplex.
    let gen = Generator::<f32>::new(tiny_generator_config(8, 2, 5), &mut rng).unwrap();
    let ctx = GenerationContext::sample(random_ids(3, 5, 8, &mut rng), vec![0, 1, 0], 4, &mut rng);
    for beta in betas {
        let mut g = Graph::new();
        let out = gen.generate_relaxed_with_rng(&mut g, &ctx, beta as f32, &mut rng).unwrap();
        for row in g.value(out.rows).rows() {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            ensure(row.iter().all(|&p| p >= 0.0) && (s - 1.0).abs() <= SIMPLEX_TOL, || format!("generator row sums to {s}"))?;
        }
    }

    let draws: Array2<f64> = sample_gumbel(1000, GUMBEL_DRAWS / 1000, &mut rng);
    let mean = draws.mean().unwrap();
    ensure((mean - EULER_GAMMA).abs() < GUMBEL_MEAN_TOL, || format!("Gumbel mean {mean}"))?;
    let elapsed = start.elapsed();
    within(elapsed, GUMBEL_BUDGET)?;
    Ok(format!("Gumbel mean {mean:.4} over {GUMBEL_DRAWS} draws, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 3. Gradient checks

fn gradient_fixture<F: Real>(
    gen: &Generator<F>,
    rng: &mut ChaCha8Rng,
) -> (GeneratorStepInputs<f32>, Batch) {
    let (b, t, v) = (2, gen.config.max_len, gen.config.vocab_size);
    let real = random_ids(b, t, v, rng);
    let source = random_ids(b, t, v, rng);
    let context = GenerationContext::<f32>::sample(source, vec![1, 0], gen.config.noise_dim, rng);
    let gumbel = (0..t - 1).map(|_| sample_gumbel::<f32, _>(b, v, rng)).collect();
    (
        GeneratorStepInputs { context, gumbel, real: real.clone(), beta: 1.5 },
        real,
    )
}

fn cast_inputs<G: Real>(x: &GeneratorStepInputs<f32>) -> GeneratorStepInputs<G> {
    let c = |a: &Array2<f32>| a.mapv(|v| G::of(v as f64));
    GeneratorStepInputs {
        context: GenerationContext {
            source: x.context.source.clone(),
            target: x.context.target.clone(),
            noise: c(&x.context.noise),
        },
        gumbel: x.gumbel.iter().map(c).collect(),
        real: x.real.clone(),
        beta: x.beta,
    }
}

/// Fourth-order central differences of `f` for every scalar of `params`.
fn numeric_grads(params: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64) -> Vec<Array2<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let mut grad = Array2::zeros(params.get(id).dim());
        for ((r, c), slot) in grad.indexed_iter_mut() {
            let x0 = params.get(id)[[r, c]];
            let mut at = |dx: f64| {
                probe.get_mut(id)[[r, c]] = x0 + dx;
                f(&probe)
            };
            let (p1, m1, p2, m2) = (at(FD_STEP), at(-FD_STEP), at(2.0 * FD_STEP), at(-2.0 * FD_STEP));
            probe.get_mut(id)[[r, c]] = x0;
            *slot = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

#[derive(Debug, Clone, Default)]
struct Worst {
    rel: f64,
    analytic: f64,
    numeric: f64,
    at: String,
}

impl std::fmt::Display for Worst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1e} at {} ({:.3e} vs {:.3e})", self.rel, self.at, self.analytic, self.numeric)
    }
}

fn compare(params: &ParamStore<f64>, analytic: &[Option<Array2<f64>>], numeric: &[Array2<f64>], floor: f64) -> Worst {
    let mut worst = Worst::default();
    for ((id, a), n) in params.ids().zip(analytic).zip(numeric) {
        for ((r, c), &num) in n.indexed_iter() {
            let a = a.as_ref().map_or(0.0, |g| g[[r, c]]);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            if rel > worst.rel {
                worst = Worst { rel, analytic: a, numeric: num, at: format!("{}[{r},{c}]", params.name(id)) };
            }
        }
    }
    worst
}

fn to_f64(grads: Vec<Option<Array2<f32>>>) -> Vec<Option<Array2<f64>>> {
    grads.into_iter().map(|g| g.map(|a| a.mapv(|v| v as f64))).collect()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let (v, k, t) = (8, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gen32 = Generator::<f32>::new(tiny_generator_config(v, k, t), &mut rng).unwrap();
    let disc32 = Discriminator::<f32>::new(tiny_discriminator_config(v, k), &mut rng).unwrap();
    let gen64 = Generator::<f64>::from_params(gen32.config, gen32.params.cast()).unwrap();
    let disc64 = Discriminator::<f64>::from_params(disc32.config, disc32.params.cast()).unwrap();
    let (in32, real) = gradient_fixture(&gen32, &mut rng);
    let in64: GeneratorStepInputs<f64> = cast_inputs(&in32);
    let weights = LossWeights::default();

    // l_g with respect to the generator.
    let lg = |gen: &Generator<f64>| -> (f64, Vec<Option<Array2<f64>>>) {
        let mut g = Graph::new();
        let (root, _) = generator_objective(&mut g, gen, &disc64, &in64, &weights).unwrap();
        let value = g.scalar(root);
        let grads = g.backward(root);
        (value, g.param_grads(&grads, &gen.params))
    };
    let (_, analytic64) = lg(&gen64);
    let f_g = |p: &ParamStore<f64>| {
        let gen = Generator::from_params(gen64.config, p.clone()).unwrap();
        let mut g = Graph::new();
        let (root, _) = generator_objective(&mut g, &gen, &disc64, &in64, &weights).unwrap();
        g.scalar(root)
    };
    let mut g = Graph::new();
    let (root, _) = generator_objective(&mut g, &gen32, &disc32, &in32, &weights).unwrap();
    let grads = g.backward(root);
    let analytic32 = to_f64(g.param_grads(&grads, &gen32.params));
    let numeric = numeric_grads(&gen64.params, &f_g);
    let g64 = compare(&gen64.params, &analytic64, &numeric, GRAD_FLOOR_F64);
    let g32 = compare(&gen64.params, &analytic32, &numeric, GRAD_FLOOR_F32);

    // l_d with respect to the discriminator, on relaxed fakes from the generator.
    let mut g = Graph::new();
    let fake = gen64.generate_relaxed(&mut g, &in64.context, in64.beta, &in64.gumbel).unwrap();
    let d64 = DiscriminatorStepInputs {
        fake: g.value(fake.rows).clone(),
        requested: in64.context.target.clone(),
        real: real.clone(),
        real_targets: vec![1.0, 0.0],
        fake_targets: vec![0.0, 0.0],
    };
    let d32 = DiscriminatorStepInputs {
        fake: d64.fake.mapv(|x| x as f32),
        requested: d64.requested.clone(),
        real: d64.real.clone(),
        real_targets: d64.real_targets.clone(),
        fake_targets: d64.fake_targets.clone(),
    };
    let f_d = |p: &ParamStore<f64>| {
        let disc = Discriminator::from_params(disc64.config, p.clone()).unwrap();
        let mut g = Graph::new();
        let (root, _) = discriminator_objective(&mut g, &disc, &d64, &weights, 0.0).unwrap();
        g.scalar(root)
    };
    let mut g = Graph::new();
    let (root, _) = discriminator_objective(&mut g, &disc64, &d64, &weights, 0.0).unwrap();
    let grads = g.backward(root);
    let analytic_d64 = g.param_grads(&grads, &disc64.params);
    // The f32 fakes are rounded, so the f64 reference uses the same rounded rows.
    let d64_rounded = DiscriminatorStepInputs { fake: d32.fake.mapv(|x| x as f64), ..d64.clone() };
    let f_d32 = |p: &ParamStore<f64>| {
        let disc = Discriminator::from_params(disc64.config, p.clone()).unwrap();
        let mut g = Graph::new();
        let (root, _) = discriminator_objective(&mut g, &disc, &d64_rounded, &weights, 0.0).unwrap();
        g.scalar(root)
    };
    let mut g = Graph::new();
    let (root, _) = discriminator_objective(&mut g, &disc32, &d32, &weights, 0.0).unwrap();
    let grads = g.backward(root);
    let analytic_d32 = to_f64(g.param_grads(&grads, &disc32.params));
    let d_64 = compare(&disc64.params, &analytic_d64, &numeric_grads(&disc64.params, &f_d), GRAD_FLOOR_F64);
    let d_32 = compare(&disc64.params, &analytic_d32, &numeric_grads(&disc64.params, &f_d32), GRAD_FLOOR_F32);

    let summary = format!(
        "l_g f64 {g64} f32 {g32}; l_d f64 {d_64} f32 {d_32}; {} + {} parameters",
        gen64.params.num_scalars(),
        disc64.params.num_scalars()
    );
    ensure(g64.rel < GRAD_TOL_F64 && d_64.rel < GRAD_TOL_F64, || format!("double precision: {summary}"))?;
    ensure(g32.rel < GRAD_TOL_F32 && d_32.rel < GRAD_TOL_F32, || format!("single precision: {summary}"))?;
    let elapsed = start.elapsed();
    within(elapsed, GRAD_BUDGET)?;
    Ok(format!("{summary}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 4. Discriminator embedding

fn bits<F: Real>(a: &Array2<F>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in a {
        v.write_le(&mut out);
    }
    out
}

fn embedding_equivalence_for<F: Real>(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (v, k, b, t) = (24, 2, 4, 10);
    let disc = Discriminator::<F>::new(DiscriminatorConfig::full_size(v, k), rng).unwrap();
    let batch = random_ids(b, t, v, rng);
    let mut g = Graph::new();
    let x = g.leaf(one_hot::<F>(&batch.ids, v).unwrap());
    let dense = disc.embed_continuous(&mut g, x).unwrap();
    let lookup = disc.embed_ids(&mut g, &batch.ids).unwrap();
    ensure(bits(g.value(dense)) == bits(g.value(lookup)), || format!("{} embeddings differ", F::DTYPE))?;
    let a = disc.discriminate_one_hot(&mut g, &batch).unwrap();
    let b2 = disc.discriminate_ids(&mut g, &batch).unwrap();
    ensure(bits(g.value(a.d_r)) == bits(g.value(b2.d_r)), || format!("{} D_r differs", F::DTYPE))?;
    ensure(bits(g.value(a.d_cls)) == bits(g.value(b2.d_cls)), || format!("{} D_cls differs", F::DTYPE))
}

fn embedding_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        embedding_equivalence_for::<f32>(&mut rng)?;
        embedding_equivalence_for::<f64>(&mut rng)?;
    }
    Ok("bit-identical in f32 and f64 over 10 random batches".into())
}

// ---------------------------------------------------------------------------
// 5. NLL_div against enumeration

fn repeated_context(gen: &Generator<f64>, rows: usize, rng: &mut ChaCha8Rng) -> GenerationContext<f64> {
    let t = gen.config.max_len;
    let one = GenerationContext::<f64>::sample(random_ids(1, t, gen.config.vocab_size, rng), vec![1], gen.config.noise_dim, rng);
    let index = vec![0; rows];
    GenerationContext {
        source: one.source.rows(&index),
        target: vec![1; rows],
        noise: one.noise.select(Axis(0), &index),
    }
}

fn nll_enumeration() -> Outcome {
    let start = Instant::now();
    let (v, t) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = tiny_generator_config(v, 2, t);
    cfg.init = InitScheme::Small(0.5);
    let gen = Generator::<f64>::new(cfg, &mut rng).unwrap();

    let n = v * v * v;
    let mut ids = Array2::from_elem((n, t), BOS);
    for s in 0..n {
        ids[[s, 1]] = s / (v * v);
        ids[[s, 2]] = (s / v) % v;
        ids[[s, 3]] = s % v;
    }
    let ctx = repeated_context(&gen, n, &mut rng);
    let mut g = Graph::new();
    let logits = gen.teacher_forced_logits(&mut g, &Batch::from_ids(ids.clone(), vec![1; n]), &ctx).unwrap();
    let lp_rows = log_softmax_rows(g.value(logits));
    let mut lp = Array2::zeros((n, t - 1));
    for s in 0..n {
        for step in 0..t - 1 {
            lp[[s, step]] = lp_rows[[s * (t - 1) + step, ids[[s, step + 1]]]];
        }
    }
    let (mut mass, mut weighted, mut total_mass) = (0.0, 0.0, 0.0);
    for s in 0..n {
        let p = lp.row(s).sum().exp();
        total_mass += p;
        let row_ids = ids.select(Axis(0), &[s]);
        let row_lp = lp.select(Axis(0), &[s]);
        if let Some(&v) = per_token_nll(&row_ids, &row_lp).first() {
            mass += p;
            weighted += p * v;
        }
    }
    ensure((total_mass - 1.0).abs() < 1e-9, || format!("enumerated mass {total_mass}"))?;
    let exact = weighted / mass;

    let batch = 1000;
    let ctx = GenerationContext {
        source: ctx.source.rows(&vec![0; batch]),
        target: vec![1; batch],
        noise: ctx.noise.select(Axis(0), &vec![0; batch]),
    };
    let mc = nll_div(&gen, &[ctx], NLL_SAMPLES / batch, &mut rng).unwrap();
    let elapsed = start.elapsed();
    ensure((mc - exact).abs() < NLL_TOL, || format!("Monte Carlo {mc} vs exact {exact}"))?;
    within(elapsed, NLL_BUDGET)?;
    Ok(format!("Monte Carlo {mc:.4} vs enumeration {exact:.4} over {n} sequences, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 6. BLEU

fn count_in(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len()).filter(|&i| &tokens[i..i + gram.len()] == gram).count()
}

fn oracle_sentence_bleu(hyp: &[String], refs: &[Vec<String>], max_n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0;
        let mut total = 0;
        let mut seen: Vec<&[String]> = Vec::new();
        if hyp.len() >= n {
            for i in 0..=hyp.len() - n {
                let gram = &hyp[i..i + n];
                total += 1;
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let own = count_in(hyp, gram);
                let clip = refs.iter().map(|r| count_in(r, gram)).max().unwrap_or(0);
                matched += own.min(clip);
            }
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hyp.len();
    let mut r = refs[0].len();
    for rf in refs {
        let (d, best) = (rf.len().abs_diff(c), r.abs_diff(c));
        if d < best || (d == best && rf.len() < r) {
            r = rf.len();
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

fn bleu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words: Vec<String> = ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec();
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let len = rng.random_range(min..=8);
        (0..len).map(|_| words.choose(rng).unwrap().clone()).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..BLEU_TRIALS {
        let refs: Vec<Vec<String>> = (0..rng.random_range(1..=5)).map(|_| sentence(&mut rng, 1)).collect();
        let hyps: Vec<Vec<String>> = (0..rng.random_range(1..=5)).map(|_| sentence(&mut rng, 0)).collect();
        for max_n in 1..=4 {
            let got = bleu_n(&hyps, &BleuConfig { max_n, references: refs.clone() }).unwrap();
            let want = hyps.iter().map(|h| oracle_sentence_bleu(h, &refs, max_n)).sum::<f64>() / hyps.len() as f64;
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= BLEU_TOL, || format!("max deviation from the oracle {worst:e}"))?;

    let refs: Vec<Vec<String>> = (0..20).map(|_| sentence(&mut rng, 1)).collect();
    for max_n in 2..=3 {
        let identity = bleu_n(&refs, &BleuConfig { max_n, references: refs.clone() }).unwrap();
        ensure(identity == 1.0, || format!("identity BLEU-{max_n} = {identity}"))?;
        let other: Vec<Vec<String>> = refs.iter().map(|r| r.iter().map(|w| format!("{w}{w}")).collect()).collect();
        let disjoint = bleu_n(&other, &BleuConfig { max_n, references: refs.clone() }).unwrap();
        ensure(disjoint < 0.01, || format!("disjoint BLEU-{max_n} = {disjoint}"))?;
    }
    Ok(format!("{BLEU_TRIALS} random sets × 4 orders, max deviation {worst:.1e}; identity 1.0, disjoint 0"))
}

// ---------------------------------------------------------------------------
// 7 and 9. Miniature end-to-end run

struct ToyRun {
    checkpoint: Vec<u8>,
    report: String,
    fidelity: f64,
    nll_div: f64,
    collapsed_nll_div: f64,
    elapsed: Duration,
}

fn toy_data(grammar: &ToyGrammar) -> Dataset {
    grammar.dataset(500, 50, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn toy_configs(data: &Dataset) -> (GeneratorConfig, DiscriminatorConfig, TrainingConfig) {
    let d = 32;
    let (v, k, t) = (data.vocab.len(), data.num_categories, data.max_len);
    let generator = GeneratorConfig {
        embed_dim: d,
        cat_embed_dim: d / 2,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: d,
        ffn_hidden: 2 * d,
        rmc_slots: 2,
        rmc_heads: 2,
        rmc_head_size: d / 2,
        noise_dim: d / 2,
        max_len: t,
        vocab_size: v,
        num_categories: k,
        init: InitScheme::Xavier,
    };
    let discriminator = DiscriminatorConfig {
        embed_dim: d,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: d,
        ffn_hidden: 2 * d,
        vocab_size: v,
        num_categories: k,
        init: InitScheme::Xavier,
    };
    let training = TrainingConfig {
        batch_size: 32,
        adam: AdamConfig { learning_rate: 3e-4, ..AdamConfig::default() },
        pretrain_adam: Some(AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() }),
        pretrain_epochs_g: 20,
        pretrain_epochs_d: 1,
        adversarial_iterations: TOY_ITERATIONS,
        beta: BetaSchedule::Exponential { start: 10.0, end: 100.0, horizon: TOY_ITERATIONS },
        seed: 1,
        ..TrainingConfig::default()
    };
    (generator, discriminator, training)
}

/// Same architecture trained to emit one fixed sentence whatever the
/// conditioning.
fn collapsed_generator(config: GeneratorConfig, data: &Dataset, seed: u64) -> Generator<f32> {
    let mut rng = derive(seed, Stream::Init, 1);
    let mut gen = Generator::<f32>::new(config, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() }, &gen.params);
    let sentence = &data.train[0];
    for _ in 0..300 {
        let ctx = sample_context(&gen, data, Split::Train, 16, &mut rng).unwrap();
        let target = data.batch_of(std::iter::repeat_n(sentence, 16));
        let mut g = Graph::new();
        let logits = gen.teacher_forced_logits(&mut g, &target, &ctx).unwrap();
        let loss = masked_nll_var(&mut g, logits, &target.ids).unwrap();
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads, &gen.params);
        adam.step(&mut gen.params, &pg);
    }
    gen
}

fn toy_run() -> ToyRun {
    let start = Instant::now();
    let grammar = ToyGrammar::two_category();
    let data = toy_data(&grammar);
    let (gcfg, dcfg, tcfg) = toy_configs(&data);
    let mut rng = derive(tcfg.seed, Stream::Init, 0);
    let mut gen = Generator::<f32>::new(gcfg, &mut rng).unwrap();
    let mut disc = Discriminator::<f32>::new(dcfg, &mut rng).unwrap();
    pretrain_generator(&mut gen, &data, &tcfg).unwrap();
    pretrain_discriminator(&mut disc, &gen, &data, &tcfg).unwrap();
    let mut state = AdversarialState::new(gen, disc, &tcfg);
    adversarial_train(&mut state, &data, &tcfg, &RunOutputs::default()).unwrap();
    let eval = EvaluationConfig { seed: tcfg.seed, ..EvaluationConfig::default() };
    let report = evaluate_generator(&state.generator, &data, &eval, |s| grammar.classify(s)).unwrap();
    let collapsed = collapsed_generator(gcfg, &data, tcfg.seed);
    let collapsed_report = evaluate_generator(&collapsed, &data, &eval, |s| grammar.classify(s)).unwrap();
    ToyRun {
        checkpoint: state.to_checkpoint().to_bytes().unwrap(),
        report: report.to_text(),
        fidelity: report.category_fidelity,
        nll_div: report.nll_div,
        collapsed_nll_div: collapsed_report.nll_div,
        elapsed: start.elapsed(),
    }
}

fn first_toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(toy_run)
}

fn category_control() -> Outcome {
    let grammar = ToyGrammar::two_category();
    let data = toy_data(&grammar);
    ensure(data.vocab.len() == 24 && data.max_len == 10, || "toy corpus shape".into())?;
    let run = first_toy_run();
    let gap = run.nll_div - run.collapsed_nll_div;
    let summary = format!(
        "fidelity {:.3}, NLL_div {:.3} vs collapsed {:.3} (gap {gap:.3}), {TOY_ITERATIONS} iterations in {:.1?}",
        run.fidelity, run.nll_div, run.collapsed_nll_div, run.elapsed
    );
    ensure(run.fidelity >= FIDELITY_MIN, || summary.clone())?;
    ensure(gap >= NLL_GAP_MIN, || summary.clone())?;
    within(run.elapsed, TOY_BUDGET)?;
    Ok(summary)
}

fn reproducibility() -> Outcome {
    let first = first_toy_run();
    let second = toy_run();
    ensure(first.checkpoint == second.checkpoint, || "checkpoints differ".into())?;
    ensure(first.report == second.report, || "reports differ".into())?;
    let ckpt = Checkpoint::<f32>::from_bytes(&second.checkpoint).map_err(|e| e.to_string())?;
    ensure(ckpt.to_bytes().map_err(|e| e.to_string())? == second.checkpoint, || "checkpoint does not round-trip".into())?;
    Ok(format!("{} checkpoint bytes and {} report bytes identical", first.checkpoint.len(), first.report.len()))
}

// ---------------------------------------------------------------------------
// 8. Augmentation mechanics

fn augmentation_mechanics() -> Outcome {
    let grammar = ToyGrammar::two_category();
    let data = grammar.dataset(20, 10, 100, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let cfg = AugmentationConfig {
        runs: AUG_RUNS,
        n_synth_per_class: 100,
        classifier: ClassifierConfig {
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            attn_hidden: 16,
            ffn_hidden: 32,
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 30,
            init: InitScheme::Xavier,
        },
        alpha: AUG_ALPHA,
        seed: 8,
    };
    let corrupt = LabelCorruptingSource { train: &data.train, num_categories: data.num_categories };
    let bad = augmentation_eval(&data, &corrupt, &cfg).map_err(|e| e.to_string())?;
    let copy = CopySource { train: &data.train };
    let neutral = augmentation_eval(&data, &copy, &cfg).map_err(|e| e.to_string())?;
    let summary = format!(
        "corrupting: Δ {:+.3}, p {:.2e}; copy: Δ {:+.3}, p {:.3}",
        bad.mean_delta, bad.p_value, neutral.mean_delta, neutral.p_value
    );
    ensure(bad.significant && bad.mean_delta < 0.0 && bad.p_value < AUG_ALPHA, || summary.clone())?;
    ensure(!neutral.significant, || summary.clone())?;
    ensure(bad.baseline_accuracies.len() == AUG_RUNS, || "wrong number of runs".into())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [Check; 9] = [
        ("1 loss formulas", loss_formulas),
        ("2 gumbel-softmax", gumbel_suite),
        ("3 gradient checks", gradient_checks),
        ("4 embedding equivalence", embedding_equivalence),
        ("5 NLL_div enumeration", nll_enumeration),
        ("6 BLEU oracle", bleu_oracle),
        ("7 category control", category_control),
        ("8 augmentation mechanics", augmentation_mechanics),
        ("9 reproducibility", reproducibility),
    ];
    let mut failed = 0;
    panic::set_hook(Box::new(|_| {}));
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
