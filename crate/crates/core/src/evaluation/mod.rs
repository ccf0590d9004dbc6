//! Quality, diversity and usefulness metrics for generated text.

pub mod bleu;
pub mod classifier;

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autograd::Real;
use crate::corpus::{Dataset, LabeledSentence, Split, EOS, PAD};
use crate::error::{Error, Result};
use crate::generator::{DecodeMode, GenerationContext, Generator};
use crate::seeding::{derive, Stream};

pub use bleu::{bleu_n, BleuConfig, BleuReference};
pub use classifier::{train_classifier, Classifier, ClassifierConfig};

/// Per-sample per-token negative log-likelihood of generated sequences.
///
/// `ids` is `B×T` with BOS in column 0 and `log_probs` is `B×(T−1)`. A
/// sample's tokens run up to and including its first EOS; PAD tokens are
/// not counted. Samples with no counted token are skipped.
pub fn per_token_nll<F: Real>(ids: &Array2<usize>, log_probs: &Array2<F>) -> Vec<f64> {
    let (b, len) = ids.dim();
    debug_assert_eq!(log_probs.dim(), (b, len - 1));
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let (mut sum, mut count) = (0.0, 0usize);
        for t in 1..len {
            let id = ids[[r, t]];
            if id != PAD {
                sum -= log_probs[[r, t - 1]].as_f64();
                count += 1;
            }
            if id == EOS {
                break;
            }
        }
        if count > 0 {
            out.push(sum / count as f64);
        }
    }
    out
}

/// Mean per-token NLL of `n_samples` sampled sequences per context row.
pub fn nll_div<F: Real, R: Rng + ?Sized>(
    gen: &Generator<F>,
    contexts: &[GenerationContext<F>],
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 || contexts.is_empty() {
        return Err(Error::InvalidInput("nll_div needs contexts and n_samples ≥ 1".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for ctx in contexts {
        for _ in 0..n_samples {
            let out = gen.generate_discrete(ctx, DecodeMode::Sample, rng)?;
            for v in per_token_nll(&out.ids, &out.log_probs) {
                total += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no generated sample had a token".into()));
    }
    Ok(total / count as f64)
}

/// Fraction of sentences the checker assigns to their requested category.
pub fn category_fidelity<C>(requested: &[usize], sentences: &[Vec<String>], checker: C) -> Result<f64>
where
    C: Fn(&[String]) -> Option<usize>,
{
    if requested.len() != sentences.len() {
        return Err(Error::InvalidInput(format!(
            "{} requests for {} sentences",
            requested.len(),
            sentences.len()
        )));
    }
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no sentences to check".into()));
    }
    let honored = requested
        .iter()
        .zip(sentences)
        .filter(|(&c, s)| checker(s) == Some(c))
        .count();
    Ok(honored as f64 / sentences.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub df: usize,
    pub significant: bool,
    /// Differences had zero variance but a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "paired t-test needs two equal samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let df = n - 1;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / df as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p_value: 1.0,
                df,
                significant: false,
                degenerate: false,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                df,
                significant: true,
                degenerate: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p_value,
        df,
        significant: p_value < alpha,
        degenerate: false,
    })
}

/// Supplies labeled synthetic sentences for augmentation.
pub trait SentenceSource {
    fn generate(&self, category: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>>;
}

/// Decodes sentences from a generator, conditioning on random training
/// sentences and the requested category.
pub struct GeneratorSource<'a, F: Real> {
    pub generator: &'a Generator<F>,
    pub data: &'a Dataset,
    pub mode: DecodeMode,
    pub batch_size: usize,
}

impl<F: Real> SentenceSource for GeneratorSource<'_, F> {
    fn generate(&self, category: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
        generate_sentences(self.generator, self.data, Split::Train, &vec![category; count], self.mode, self.batch_size, rng)
    }
}

/// Re-emits training sentences of the requested category.
pub struct CopySource<'a> {
    pub train: &'a [LabeledSentence],
}

/// Emits training sentences of a different category under the requested
/// label.
pub struct LabelCorruptingSource<'a> {
    pub train: &'a [LabeledSentence],
    pub num_categories: usize,
}

fn draw_from(train: &[LabeledSentence], category: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
    let pool: Vec<&LabeledSentence> = train.iter().filter(|s| s.category == category).collect();
    if pool.is_empty() {
        return Err(Error::EmptySplit(format!("train sentences of category {category}")));
    }
    Ok((0..count)
        .map(|_| pool[rng.random_range(0..pool.len())].tokens.clone())
        .collect())
}

impl SentenceSource for CopySource<'_> {
    fn generate(&self, category: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
        draw_from(self.train, category, count, rng)
    }
}

impl SentenceSource for LabelCorruptingSource<'_> {
    fn generate(&self, category: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
        draw_from(self.train, (category + 1) % self.num_categories, count, rng)
    }
}

/// Generates one sentence per entry of `requested`, with sources drawn
/// uniformly from `split`.
pub fn generate_sentences<F: Real, R: Rng + ?Sized>(
    gen: &Generator<F>,
    data: &Dataset,
    split: Split,
    requested: &[usize],
    mode: DecodeMode,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(requested.len());
    for chunk in requested.chunks(batch_size.max(1)) {
        let source = data.sample_batch(split, chunk.len(), rng)?;
        let ctx = GenerationContext::sample(source, chunk.to_vec(), gen.config.noise_dim, rng);
        let sample = gen.generate_discrete(&ctx, mode, rng)?;
        for row in sample.ids.rows() {
            out.push(data.vocab.decode(&row.to_vec())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub n_synth_per_class: usize,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Not serialized: experiments derive it from their root seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_runs() -> usize {
    10
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub baseline_accuracies: Vec<f64>,
    pub augmented_accuracies: Vec<f64>,
    /// Mean of augmented minus baseline.
    pub mean_delta: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Trains the downstream classifier with and without synthetic data in
/// each seeded run and compares test accuracies with a paired t-test.
/// Both arms of a run share the classifier seed.
pub fn augmentation_eval(data: &Dataset, source: &dyn SentenceSource, cfg: &AugmentationConfig) -> Result<AugmentationReport> {
    if cfg.runs < 2 {
        return Err(Error::Config("augmentation needs at least 2 runs".into()));
    }
    if data.test.is_empty() {
        return Err(Error::EmptySplit(Split::Test.to_string()));
    }
    let mut baseline = Vec::with_capacity(cfg.runs);
    let mut augmented = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let mut synth_rng = derive(cfg.seed, Stream::Augmentation, 2 * run as u64);
        let mut extra = data.train.clone();
        for c in 0..data.num_categories {
            for tokens in source.generate(c, cfg.n_synth_per_class, &mut synth_rng)? {
                // Empty decodes carry no signal and cannot be encoded as a sentence.
                if !tokens.is_empty() {
                    extra.push(LabeledSentence::new(tokens, c));
                }
            }
        }
        let clf_seed = 2 * run as u64 + 1;
        let mut rng = derive(cfg.seed, Stream::Augmentation, clf_seed);
        let base = train_classifier::<f32, _>(&data.train, &data.vocab, data.num_categories, data.max_len, &cfg.classifier, &mut rng)?;
        baseline.push(base.accuracy(&data.test, &data.vocab, data.max_len)?);
        let mut rng = derive(cfg.seed, Stream::Augmentation, clf_seed);
        let aug = train_classifier::<f32, _>(&extra, &data.vocab, data.num_categories, data.max_len, &cfg.classifier, &mut rng)?;
        augmented.push(aug.accuracy(&data.test, &data.vocab, data.max_len)?);
    }
    let test = paired_t_test(&augmented, &baseline, cfg.alpha)?;
    let mean_delta = augmented.iter().zip(&baseline).map(|(a, b)| a - b).sum::<f64>() / cfg.runs as f64;
    Ok(AugmentationReport {
        baseline_accuracies: baseline,
        augmented_accuracies: augmented,
        mean_delta,
        t_statistic: test.t,
        p_value: test.p_value,
        significant: test.significant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Generated sentences per category for BLEU and fidelity.
    pub samples_per_category: usize,
    /// Samples per context row for NLL_div.
    pub nll_samples: usize,
    pub mode: DecodeMode,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            samples_per_category: 1000,
            nll_samples: 1,
            mode: DecodeMode::Sample,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub bleu2: f64,
    pub bleu3: f64,
    pub nll_div: f64,
    pub category_fidelity: f64,
    pub samples: usize,
    pub augmentation: Option<AugmentationReport>,
}

pub const REPORT_VERSION: &str = "fagan-evaluation-report 1";

impl EvaluationReport {
    /// `key<TAB>value` lines after a version line. Accuracy lists are
    /// comma-separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_VERSION}").unwrap();
        writeln!(s, "bleu2\t{}", self.bleu2).unwrap();
        writeln!(s, "bleu3\t{}", self.bleu3).unwrap();
        writeln!(s, "nll_div\t{}", self.nll_div).unwrap();
        writeln!(s, "category_fidelity\t{}", self.category_fidelity).unwrap();
        writeln!(s, "samples\t{}", self.samples).unwrap();
        if let Some(a) = &self.augmentation {
            write!(s, "{}", augmentation_lines(a)).unwrap();
        }
        s
    }
}

pub fn augmentation_lines(a: &AugmentationReport) -> String {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "baseline_accuracies\t{}\naugmented_accuracies\t{}\nmean_delta\t{}\nt_statistic\t{}\np_value\t{}\nsignificant\t{}\n",
        join(&a.baseline_accuracies),
        join(&a.augmented_accuracies),
        a.mean_delta,
        a.t_statistic,
        a.p_value,
        a.significant
    )
}

/// BLEU-2/3 against the test split, NLL_div and category fidelity of
/// `samples_per_category` generated sentences per category. Sources are
/// drawn from the training split independently of the requested category.
pub fn evaluate_generator<F: Real, C>(gen: &Generator<F>, data: &Dataset, cfg: &EvaluationConfig, checker: C) -> Result<EvaluationReport>
where
    C: Fn(&[String]) -> Option<usize>,
{
    if cfg.samples_per_category == 0 || cfg.nll_samples == 0 {
        return Err(Error::Config("evaluation sample counts must be ≥ 1".into()));
    }
    if data.test.is_empty() {
        return Err(Error::EmptySplit(Split::Test.to_string()));
    }
    let mut rng = derive(cfg.seed, Stream::Evaluation, 0);
    let requested: Vec<usize> = (0..data.num_categories)
        .flat_map(|c| std::iter::repeat_n(c, cfg.samples_per_category))
        .collect();
    let sentences = generate_sentences(gen, data, Split::Train, &requested, cfg.mode, cfg.batch_size, &mut rng)?;
    let refs: Vec<Vec<String>> = data.test.iter().map(|s| s.tokens.clone()).collect();
    let bleu2 = BleuReference::new(&refs, 2)?.corpus_score(&sentences)?;
    let bleu3 = BleuReference::new(&refs, 3)?.corpus_score(&sentences)?;
    let fidelity = category_fidelity(&requested, &sentences, checker)?;

    let mut rng = derive(cfg.seed, Stream::Evaluation, 1);
    let mut contexts = Vec::new();
    for chunk in requested.chunks(cfg.batch_size.max(1)) {
        let source = data.sample_batch(Split::Train, chunk.len(), &mut rng)?;
        contexts.push(GenerationContext::sample(source, chunk.to_vec(), gen.config.noise_dim, &mut rng));
    }
    let nll = nll_div(gen, &contexts, cfg.nll_samples, &mut rng)?;
    Ok(EvaluationReport {
        bleu2,
        bleu3,
        nll_div: nll,
        category_fidelity: fidelity,
        samples: sentences.len(),
        augmentation: None,
    })
}
