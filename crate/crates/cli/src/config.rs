//! Experiment configuration: one TOML file covering data, models, training
//! and evaluation, with dotted-key overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use fagan::discriminator::DiscriminatorConfig;
use fagan::evaluation::{AugmentationConfig, EvaluationConfig};
use fagan::generator::GeneratorConfig;
use fagan::nn::InitScheme;
use fagan::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    /// Sequence length including BOS and EOS.
    pub max_len: usize,
    #[serde(default = "one")]
    pub min_freq: usize,
}

fn one() -> usize {
    1
}

/// Generator dimensions; vocabulary size, category count and length come
/// from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorDims {
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
    pub init: InitScheme,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        let c = GeneratorConfig::full_size(4, 2, 3);
        GeneratorDims {
            embed_dim: c.embed_dim,
            cat_embed_dim: c.cat_embed_dim,
            n_encoder_layers: c.n_encoder_layers,
            n_attn_heads: c.n_attn_heads,
            attn_hidden: c.attn_hidden,
            ffn_hidden: c.ffn_hidden,
            rmc_slots: c.rmc_slots,
            rmc_heads: c.rmc_heads,
            rmc_head_size: c.rmc_head_size,
            noise_dim: c.noise_dim,
            init: c.init,
        }
    }
}

impl GeneratorDims {
    pub fn resolve(&self, vocab_size: usize, num_categories: usize, max_len: usize) -> GeneratorConfig {
        GeneratorConfig {
            embed_dim: self.embed_dim,
            cat_embed_dim: self.cat_embed_dim,
            n_encoder_layers: self.n_encoder_layers,
            n_attn_heads: self.n_attn_heads,
            attn_hidden: self.attn_hidden,
            ffn_hidden: self.ffn_hidden,
            rmc_slots: self.rmc_slots,
            rmc_heads: self.rmc_heads,
            rmc_head_size: self.rmc_head_size,
            noise_dim: self.noise_dim,
            max_len,
            vocab_size,
            num_categories,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorDims {
    pub embed_dim: usize,
    pub n_encoder_layers: usize,
    pub n_attn_heads: usize,
    pub attn_hidden: usize,
    pub ffn_hidden: usize,
    pub init: InitScheme,
}

impl Default for DiscriminatorDims {
    fn default() -> Self {
        let c = DiscriminatorConfig::full_size(4, 2);
        DiscriminatorDims {
            embed_dim: c.embed_dim,
            n_encoder_layers: c.n_encoder_layers,
            n_attn_heads: c.n_attn_heads,
            attn_hidden: c.attn_hidden,
            ffn_hidden: c.ffn_hidden,
            init: c.init,
        }
    }
}

impl DiscriminatorDims {
    pub fn resolve(&self, vocab_size: usize, num_categories: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            embed_dim: self.embed_dim,
            n_encoder_layers: self.n_encoder_layers,
            n_attn_heads: self.n_attn_heads,
            attn_hidden: self.attn_hidden,
            ffn_hidden: self.ffn_hidden,
            vocab_size,
            num_categories,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every module derives its own streams from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub generator: GeneratorDims,
    #[serde(default)]
    pub discriminator: DiscriminatorDims,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub augmentation: AugmentationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings) and validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn propagate_seed(&mut self) {
        self.training.seed = self.seed;
        self.evaluation.seed = self.seed;
        self.augmentation.seed = self.seed;
    }

    /// Checks every section against its module's invariants. Data-dependent
    /// sizes are stood in by their smallest legal values.
    pub fn validate(&self) -> CliResult<()> {
        if self.data.max_len < 3 {
            return Err(CliError::Config(format!("data.max_len must be ≥ 3, got {}", self.data.max_len)));
        }
        if self.data.min_freq == 0 {
            return Err(CliError::Config("data.min_freq must be ≥ 1".into()));
        }
        let section = |r: fagan::error::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        section(self.generator.resolve(4, 2, self.data.max_len).validate())?;
        section(self.discriminator.resolve(4, 2).validate())?;
        section(self.training.validate())?;
        section(self.augmentation.classifier.validate())?;
        if self.augmentation.runs < 2 || !(0.0..1.0).contains(&self.augmentation.alpha) {
            return Err(CliError::Config("augmentation needs runs ≥ 2 and alpha in (0, 1)".into()));
        }
        let e = &self.evaluation;
        if e.samples_per_category == 0 || e.nll_samples == 0 || e.batch_size == 0 {
            return Err(CliError::Config("evaluation counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn apply_override(root: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("invalid override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
