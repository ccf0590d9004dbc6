//! Subcommand implementations. Every command reads the experiment config and
//! the artifacts of earlier stages from `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use fagan::checkpoint::Checkpoint;
use fagan::corpus::{read_labeled, write_labeled, Batch, Dataset, LabeledSentence, Split, Vocabulary};
use fagan::discriminator::Discriminator;
use fagan::evaluation::classifier::train_classifier;
use fagan::evaluation::{
    augmentation_eval, augmentation_lines, evaluate_generator, generate_sentences, GeneratorSource,
};
use fagan::generator::{DecodeMode, GenerationContext, Generator};
use fagan::seeding::{derive, Stream};
use fagan::training::{
    adversarial_train, pretrain_discriminator, pretrain_generator, AdversarialState, RunOutputs,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVALUATION_REPORT: &str = "evaluation.txt";
pub const AUGMENTATION_REPORT: &str = "augmentation.txt";
pub const AUGMENTATION_VERSION: &str = "fagan-augmentation-report 1";

const SPLITS: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

type Precision = f32;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| fagan::error::Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| fagan::error::Error::io(path, e).into())
}

fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

fn ids_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.ids"))
}

/// Reads the raw splits, builds the vocabulary and writes the tokenized
/// splits, their id encodings and the vocabulary to `output_dir`.
pub fn preprocess(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    let data = Dataset::load(&d.train, &d.valid, &d.test, d.max_len, d.min_freq)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    data.vocab.save(&out.join(VOCAB_FILE))?;
    for split in SPLITS {
        let sentences = data.split(split);
        write_labeled(&split_file(out, split), sentences)?;
        let mut text = String::new();
        for s in sentences {
            let ids: Vec<String> = data.vocab.encode(&s.tokens, data.max_len).iter().map(usize::to_string).collect();
            text.push_str(&format!("{}\t{}\n", s.category, ids.join(" ")));
        }
        write(&ids_file(out, split), text)?;
    }
    Ok(data)
}

/// Loads the preprocessed splits and checks them against the saved
/// vocabulary.
pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let out = &cfg.output_dir;
    let vocab_path = out.join(VOCAB_FILE);
    if !vocab_path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `preprocess` first",
            vocab_path.display()
        )));
    }
    let vocab = Vocabulary::load(&vocab_path)?;
    let [train, valid, test] = SPLITS.map(|s| read_labeled(&split_file(out, s)));
    let data = Dataset::from_splits(train?, valid?, test?, cfg.data.max_len, cfg.data.min_freq)?;
    if data.vocab != vocab {
        return Err(CliError::Usage(format!(
            "{} does not match the preprocessed splits; rerun `preprocess`",
            vocab_path.display()
        )));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint<Precision>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn curve_text(curve: &[f64]) -> String {
    let mut s = String::from("epoch\tloss\n");
    for (i, v) in curve.iter().enumerate() {
        s.push_str(&format!("{i}\t{v}\n"));
    }
    s
}

/// MLE pre-training of the generator followed by discriminator
/// pre-training; writes `pretrain.ckpt` and both loss curves.
pub fn pretrain(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let data = load_dataset(cfg)?;
    let (v, k, t) = (data.vocab.len(), data.num_categories, data.max_len);
    let mut rng = derive(cfg.seed, Stream::Init, 0);
    let mut gen = Generator::<Precision>::new(cfg.generator.resolve(v, k, t), &mut rng)?;
    let mut disc = Discriminator::<Precision>::new(cfg.discriminator.resolve(v, k), &mut rng)?;
    let curve_g = pretrain_generator(&mut gen, &data, &cfg.training)?;
    let curve_d = pretrain_discriminator(&mut disc, &gen, &data, &cfg.training)?;
    let out = &cfg.output_dir;
    write(&out.join("pretrain_g.tsv"), curve_text(&curve_g))?;
    write(&out.join("pretrain_d.tsv"), curve_text(&curve_d))?;
    let path = out.join(PRETRAIN_CHECKPOINT);
    Checkpoint {
        iteration: 0,
        generator: gen,
        discriminator: Some(disc),
        optim_g: None,
        optim_d: None,
    }
    .save(&path)?;
    Ok(path)
}

/// Adversarial training from the pre-trained checkpoint, or from `resume`.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> CliResult<PathBuf> {
    let data = load_dataset(cfg)?;
    let out = &cfg.output_dir;
    let start = resume.map_or_else(|| out.join(PRETRAIN_CHECKPOINT), Path::to_path_buf);
    let mut state = AdversarialState::from_checkpoint(load_checkpoint(&start)?, &cfg.training)?;
    let outputs = RunOutputs {
        log: Some(out.join(TRAIN_LOG)),
        checkpoint_dir: Some(out.join(CHECKPOINT_DIR)),
    };
    let outcome = adversarial_train(&mut state, &data, &cfg.training, &outputs)?;
    if let Some(it) = outcome.stopped_early_at {
        eprintln!("early stop after {it} iterations");
    }
    let path = out.join(FINAL_CHECKPOINT);
    state.to_checkpoint().save(&path)?;
    Ok(path)
}

pub struct GenerateArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub category: usize,
    pub count: usize,
    pub source_file: Option<&'a Path>,
    pub mode: DecodeMode,
    pub output: Option<&'a Path>,
}

/// Writes `count` lines of `<category>\t<text>`. With a source file, line
/// `i` of it conditions sentence `i`; otherwise sources are drawn from the
/// training split.
pub fn generate(cfg: &ExperimentConfig, args: &GenerateArgs) -> CliResult<PathBuf> {
    let data = load_dataset(cfg)?;
    let ckpt_path = args.checkpoint.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let gen = load_checkpoint(&ckpt_path)?.generator;
    if args.category >= data.num_categories {
        return Err(CliError::Usage(format!(
            "category {} out of range for k = {}",
            args.category, data.num_categories
        )));
    }
    let mut rng = derive(cfg.seed, Stream::Generation, 0);
    let requested = vec![args.category; args.count];
    let sentences = match args.source_file {
        None => generate_sentences(&gen, &data, Split::Train, &requested, args.mode, cfg.evaluation.batch_size, &mut rng)?,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read source file {}: {e}", path.display())))?;
            let sources: Vec<LabeledSentence> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| LabeledSentence::new(l.split_whitespace().map(str::to_string).collect(), args.category))
                .collect();
            if sources.len() < args.count {
                return Err(CliError::Usage(format!(
                    "source file {} has {} sentences, fewer than count {}",
                    path.display(),
                    sources.len(),
                    args.count
                )));
            }
            let mut out = Vec::with_capacity(args.count);
            for chunk in sources[..args.count].chunks(cfg.evaluation.batch_size) {
                let batch = Batch::encode(chunk, &data.vocab, data.max_len);
                let ctx = GenerationContext::sample(batch, vec![args.category; chunk.len()], gen.config.noise_dim, &mut rng);
                let sample = gen.generate_discrete(&ctx, args.mode, &mut rng)?;
                for row in sample.ids.rows() {
                    out.push(data.vocab.decode(&row.to_vec())?);
                }
            }
            out
        }
    };
    let mut text = String::new();
    for s in &sentences {
        text.push_str(&format!("{}\t{}\n", args.category, s.join(" ")));
    }
    let path = args.output.map_or_else(|| cfg.output_dir.join("generated.txt"), Path::to_path_buf);
    write(&path, text)?;
    Ok(path)
}

/// BLEU, NLL_div and category fidelity of a checkpoint. Fidelity is judged
/// by a classifier trained on the training split.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let data = load_dataset(cfg)?;
    let ckpt_path = checkpoint.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let gen = load_checkpoint(&ckpt_path)?.generator;
    let mut rng = derive(cfg.seed, Stream::Evaluation, 2);
    let judge = train_classifier::<Precision, _>(
        &data.train,
        &data.vocab,
        data.num_categories,
        data.max_len,
        &cfg.augmentation.classifier,
        &mut rng,
    )?;
    let checker = |tokens: &[String]| -> Option<usize> {
        if tokens.is_empty() {
            return None;
        }
        let batch = Batch::encode(&[LabeledSentence::new(tokens.to_vec(), 0)], &data.vocab, data.max_len);
        judge.predict(&batch).ok().map(|p| p[0])
    };
    let report = evaluate_generator(&gen, &data, &cfg.evaluation, checker)?;
    let path = cfg.output_dir.join(EVALUATION_REPORT);
    write(&path, report.to_text())?;
    Ok(path)
}

/// Paired baseline/augmented classifier runs with synthetic sentences from
/// the checkpoint's generator.
pub fn augment(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let data = load_dataset(cfg)?;
    let ckpt_path = checkpoint.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let gen = load_checkpoint(&ckpt_path)?.generator;
    let source = GeneratorSource {
        generator: &gen,
        data: &data,
        mode: cfg.evaluation.mode,
        batch_size: cfg.evaluation.batch_size,
    };
    let report = augmentation_eval(&data, &source, &cfg.augmentation)?;
    let path = cfg.output_dir.join(AUGMENTATION_REPORT);
    write(&path, format!("{AUGMENTATION_VERSION}\n{}", augmentation_lines(&report)))?;
    Ok(path)
}
