use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::discriminator::DiscriminatorConfig;
use crate::generator::GeneratorConfig;
use crate::nn::InitScheme;
use crate::synthetic::ToyGrammar;

fn toy_data(per_class: usize) -> Dataset {
    ToyGrammar::two_category()
        .dataset(per_class, 10, 10, &mut ChaCha8Rng::seed_from_u64(11))
        .unwrap()
}

fn gen_config(data: &Dataset) -> GeneratorConfig {
    GeneratorConfig {
        embed_dim: 16,
        cat_embed_dim: 8,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: 16,
        ffn_hidden: 32,
        rmc_slots: 2,
        rmc_heads: 2,
        rmc_head_size: 8,
        noise_dim: 8,
        max_len: data.max_len,
        vocab_size: data.vocab.len(),
        num_categories: data.num_categories,
        init: InitScheme::Xavier,
    }
}

fn disc_config(data: &Dataset) -> DiscriminatorConfig {
    DiscriminatorConfig {
        embed_dim: 16,
        n_encoder_layers: 1,
        n_attn_heads: 2,
        attn_hidden: 16,
        ffn_hidden: 32,
        vocab_size: data.vocab.len(),
        num_categories: data.num_categories,
        init: InitScheme::Xavier,
    }
}

fn train_config() -> TrainingConfig {
    TrainingConfig {
        batch_size: 8,
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        pretrain_epochs_g: 5,
        pretrain_epochs_d: 2,
        adversarial_iterations: 4,
        beta: BetaSchedule::Exponential {
            start: 1.0,
            end: 10.0,
            horizon: 4,
        },
        seed: 3,
        ..TrainingConfig::default()
    }
}

fn state(data: &Dataset, cfg: &TrainingConfig) -> AdversarialState<f32> {
    let mut rng = derive(cfg.seed, Stream::Init, 0);
    let gen = Generator::new(gen_config(data), &mut rng).unwrap();
    let disc = Discriminator::new(disc_config(data), &mut rng).unwrap();
    AdversarialState::new(gen, disc, cfg)
}

#[test]
fn flip_rate_and_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mask = flip_mask(100_000, 0.05, &mut rng);
    let rate = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    assert!((0.045..=0.055).contains(&rate), "{rate}");

    let targets = vec![1.0, 0.0, 1.0, 0.0];
    let (r, f) = flip_labels(&targets, &targets, 0.0, &mut rng);
    assert_eq!((r, f), (targets.clone(), targets.clone()));
    let mask = vec![true, false, true, true];
    assert_eq!(apply_flip(&apply_flip(&targets, &mask), &mask), targets);
    assert_eq!(apply_flip(&targets, &mask), vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn config_validation() {
    assert!(TrainingConfig::default().validate().is_ok());
    let bad = [
        TrainingConfig { g_steps: 0, ..TrainingConfig::default() },
        TrainingConfig { label_flip_prob: 0.5, ..TrainingConfig::default() },
        TrainingConfig { lipschitz_penalty: -1.0, ..TrainingConfig::default() },
        TrainingConfig {
            weights: LossWeights { adv: -1.0, cls: 1.0 },
            ..TrainingConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn initial_reconstruction_loss_is_near_log_v() {
    let data = toy_data(20);
    let gen = Generator::<f64>::new(gen_config(&data), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = data.batch_of(&data.train);
    let ctx = reconstruction_context(&gen, &batch, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = Graph::new();
    let loss = reconstruction_loss(&mut g, &gen, &ctx).unwrap();
    let log_v = (data.vocab.len() as f64).ln();
    let value = g.scalar(loss);
    assert!((value - log_v).abs() <= 0.2 * log_v, "{value} vs {log_v}");
}

#[test]
fn generator_pretraining_reduces_loss() {
    let full = toy_data(5);
    let data = Dataset { train: full.train[..10].to_vec(), ..full };
    let mut gen = Generator::<f32>::new(gen_config(&data), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainingConfig { pretrain_epochs_g: 30, batch_size: 5, ..train_config() };
    let curve = pretrain_generator(&mut gen, &data, &cfg).unwrap();
    assert_eq!(curve.len(), 30);
    assert!(curve[29] < curve[0], "{curve:?}");
}

#[test]
fn generator_memorises_a_single_sentence() {
    let full = toy_data(5);
    let data = Dataset { train: full.train[..1].to_vec(), ..full };
    let mut gen = Generator::<f32>::new(gen_config(&data), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainingConfig {
        pretrain_epochs_g: 500,
        batch_size: 1,
        adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
        ..train_config()
    };
    let curve = pretrain_generator(&mut gen, &data, &cfg).unwrap();
    assert!(*curve.last().unwrap() < 0.1, "{:?}", &curve[curve.len() - 5..]);
}

#[test]
fn discriminator_pretraining_separates_and_classifies() {
    let data = toy_data(50);
    let cfg = TrainingConfig { pretrain_epochs_d: 10, ..train_config() };
    let mut st = state(&data, &cfg);
    pretrain_discriminator(&mut st.discriminator, &st.generator, &data, &cfg).unwrap();

    let real = data.batch_of(&data.train);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ctx = sample_context(&st.generator, &data, Split::Train, real.size(), &mut rng).unwrap();
    let fake = relaxed_values(&st.generator, &ctx, cfg.beta.beta_at(0), &mut rng).unwrap();
    let fake_scores = st.discriminator.score(&fake, real.size()).unwrap();
    let mut g = Graph::new();
    let out = st.discriminator.discriminate_ids(&mut g, &real).unwrap();
    let real_scores = g.value(out.d_r).clone();
    let pairs = real_scores.len();
    let separated = real_scores
        .iter()
        .zip(fake_scores.d_r.iter())
        .filter(|(r, f)| r > f)
        .count();
    assert!(separated as f64 / pairs as f64 > 0.9, "{separated}/{pairs}");
    let pred: Vec<usize> = g
        .value(out.d_cls)
        .rows()
        .into_iter()
        .map(|r| crate::generator::argmax(r.iter().copied()))
        .collect();
    assert_eq!(pred, real.categories);
}

fn grad_norms_by_prefix<F: Real>(
    store: &crate::autograd::ParamStore<F>,
    grads: &[Option<Array2<F>>],
    prefixes: &[&str],
) -> Vec<f64> {
    prefixes
        .iter()
        .map(|p| {
            store
                .ids()
                .zip(grads)
                .filter(|(id, _)| store.name(*id).starts_with(p))
                .filter_map(|(_, g)| g.as_ref())
                .flat_map(|g| g.iter().map(|v| v.as_f64().powi(2)))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[test]
fn gradients_reach_every_generator_submodule() {
    let data = toy_data(20);
    let cfg = train_config();
    let st = state(&data, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = st.generator_inputs(&data, 8, 1.0, &mut rng).unwrap();
    let mut g = Graph::new();
    let (root, _) = generator_objective(&mut g, &st.generator, &st.discriminator, &inputs, &cfg.weights).unwrap();
    let grads = g.backward(root);
    let pg = g.param_grads(&grads, &st.generator.params);
    let prefixes = Generator::<f32>::submodules();
    for (p, n) in prefixes.iter().zip(grad_norms_by_prefix(&st.generator.params, &pg, prefixes)) {
        assert!(n > 0.0 && n.is_finite(), "{p}: {n}");
    }
}

#[test]
fn gradients_reach_every_discriminator_parameter() {
    let data = toy_data(20);
    let cfg = train_config();
    let st = state(&data, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = st.discriminator_inputs(&data, 8, 1.0, 0.0, &mut rng).unwrap();
    let mut g = Graph::new();
    let (root, _) = discriminator_objective(&mut g, &st.discriminator, &inputs, &cfg.weights, 1.0).unwrap();
    let grads = g.backward(root);
    let pg = g.param_grads(&grads, &st.discriminator.params);
    for (id, grad) in st.discriminator.params.ids().zip(&pg) {
        let grad = grad.as_ref().unwrap_or_else(|| panic!("{} has no gradient", st.discriminator.params.name(id)));
        assert!(grad.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn each_step_updates_only_its_own_network() {
    let data = toy_data(20);
    let cfg = train_config();
    let mut st = state(&data, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let before = st.clone();
    let inputs = st.generator_inputs(&data, 8, 1.0, &mut rng).unwrap();
    st.generator_step(&inputs, &cfg.weights).unwrap();
    assert!(st.discriminator.params.bit_equal(&before.discriminator.params));
    assert!(!st.generator.params.bit_equal(&before.generator.params));

    let before = st.clone();
    let inputs = st.discriminator_inputs(&data, 8, 1.0, 0.05, &mut rng).unwrap();
    st.discriminator_step(&inputs, &cfg.weights, 0.0).unwrap();
    assert!(st.generator.params.bit_equal(&before.generator.params));
    assert!(!st.discriminator.params.bit_equal(&before.discriminator.params));
}

#[test]
fn flipping_every_label_negates_the_adversarial_term() {
    let data = toy_data(20);
    let cfg = train_config();
    let st = state(&data, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = st.discriminator_inputs::<_>(&data, 8, 1.0, 0.0, &mut rng).unwrap();
    let flipped = DiscriminatorStepInputs {
        real_targets: vec![0.0; 8],
        fake_targets: vec![1.0; 8],
        ..inputs.clone()
    };
    let report = |i: &DiscriminatorStepInputs<f32>| {
        discriminator_objective(&mut Graph::new(), &st.discriminator, i, &cfg.weights, 0.0).unwrap().1
    };
    let (a, b) = (report(&inputs), report(&flipped));
    assert!((a.l_adv_d + b.l_adv_d).abs() < 1e-6, "{} {}", a.l_adv_d, b.l_adv_d);
    assert_eq!(a.l_cls_d, b.l_cls_d);
}

#[test]
fn lipschitz_penalty_only_adds() {
    let data = toy_data(20);
    let cfg = train_config();
    let st = state(&data, &cfg);
    let inputs = st.discriminator_inputs(&data, 8, 1.0, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let total = |w: f64| {
        let mut g = Graph::new();
        let (root, _) = discriminator_objective(&mut g, &st.discriminator, &inputs, &cfg.weights, w).unwrap();
        g.scalar(root)
    };
    assert!(total(10.0) >= total(0.0));
}

#[test]
fn history_has_one_record_per_inner_step() {
    let data = toy_data(20);
    let cfg = TrainingConfig { g_steps: 2, d_steps: 3, adversarial_iterations: 3, ..train_config() };
    let mut st = state(&data, &cfg);
    let out = adversarial_train(&mut st, &data, &cfg, &RunOutputs::default()).unwrap();
    assert_eq!(out.history.len(), 3 * 5);
    let tags: String = out.history[..5].iter().map(|r| r.kind.tag()).collect();
    assert_eq!(tags, "ggddd");
    assert_eq!(st.iteration, 3);
    assert!(out.stopped_early_at.is_none());
}

#[test]
fn zero_classification_weight_stays_finite() {
    let data = toy_data(20);
    let cfg = TrainingConfig {
        adversarial_iterations: 100,
        weights: LossWeights { adv: 1.0, cls: 0.0 },
        ..train_config()
    };
    let mut st = state(&data, &cfg);
    let out = adversarial_train(&mut st, &data, &cfg, &RunOutputs::default()).unwrap();
    assert!(out.history.iter().all(|r| r.report.is_finite()));
    assert!(out.history.iter().all(|r| r.report.l_g == r.report.l_adv_g));
}

#[test]
fn runs_are_deterministic() {
    let data = toy_data(20);
    let cfg = train_config();
    let run = || {
        let mut st = state(&data, &cfg);
        let out = adversarial_train(&mut st, &data, &cfg, &RunOutputs::default()).unwrap();
        (st, out.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert!(a.generator.params.bit_equal(&b.generator.params));
    assert!(a.discriminator.params.bit_equal(&b.discriminator.params));
    assert_eq!(ha, hb);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = toy_data(20);
    let cfg = TrainingConfig { checkpoint_every: 2, ..train_config() };
    let dir = tempfile::tempdir().unwrap();
    let outputs = RunOutputs {
        log: Some(dir.path().join("log.tsv")),
        checkpoint_dir: Some(dir.path().join("ckpt")),
    };
    let mut full = state(&data, &cfg);
    let out = adversarial_train(&mut full, &data, &cfg, &outputs).unwrap();

    let ckpt = Checkpoint::<f32>::load(&checkpoint_path(&dir.path().join("ckpt"), 2)).unwrap();
    let mut resumed = AdversarialState::from_checkpoint(ckpt, &cfg).unwrap();
    assert_eq!(resumed.iteration, 2);
    let before_resume = std::fs::read_to_string(dir.path().join("log.tsv")).unwrap();
    let resumed_log = RunOutputs {
        log: Some(dir.path().join("log.tsv")),
        checkpoint_dir: None,
    };
    let tail = adversarial_train(&mut resumed, &data, &cfg, &resumed_log).unwrap();
    assert!(resumed.generator.params.bit_equal(&full.generator.params));
    assert!(resumed.discriminator.params.bit_equal(&full.discriminator.params));
    assert_eq!(tail.history, out.history[4..]);

    let text = std::fs::read_to_string(dir.path().join("log.tsv")).unwrap();
    assert_eq!(text, before_resume);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for (row, rec) in rows.iter().zip(&out.history) {
        let fields: Vec<&str> = row.split('\t').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0].parse::<usize>().unwrap(), rec.iteration);
        assert_eq!(fields[1], rec.kind.tag());
        assert_eq!(fields[4].parse::<f64>().unwrap(), rec.report.l_g);
    }
}

#[test]
fn early_stopping_halts_on_a_plateau() {
    let data = toy_data(20);
    let cfg = TrainingConfig {
        adversarial_iterations: 50,
        adam: AdamConfig { learning_rate: 1e-12, ..AdamConfig::default() },
        early_stop: Some(EarlyStop { every: 1, patience: 2, min_delta: 1.0, samples: 8 }),
        ..train_config()
    };
    let mut st = state(&data, &cfg);
    let out = adversarial_train(&mut st, &data, &cfg, &RunOutputs::default()).unwrap();
    assert_eq!(out.stopped_early_at, Some(3));
}

#[test]
fn incompatible_dataset_is_rejected() {
    let data = toy_data(5);
    let other = ToyGrammar::new(3, 4, 2, 4).unwrap().dataset(5, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut gen = Generator::<f32>::new(gen_config(&data), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(pretrain_generator(&mut gen, &other, &train_config()), Err(Error::Config(_))));
}
