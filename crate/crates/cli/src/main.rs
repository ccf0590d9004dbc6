use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fagan::generator::DecodeMode;
use fagan_cli::commands::{self, GenerateArgs};
use fagan_cli::config::ExperimentConfig;
use fagan_cli::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "fagan", version, about = "Category-conditioned text generation with a feature-aware GAN")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Override a config value, e.g. `--set training.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Argmax,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the vocabulary and tokenized splits.
    Preprocess,
    /// Pre-train the generator (MLE) and the discriminator.
    Pretrain,
    /// Adversarial training.
    Train {
        /// Continue from this checkpoint instead of the pre-trained one.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Generate sentences of one category.
    Generate {
        #[arg(long)]
        category: usize,
        #[arg(long)]
        count: usize,
        /// One source sentence per line; line i conditions output i.
        #[arg(long)]
        source_file: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sample")]
        mode: Mode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// BLEU, NLL_div and category fidelity report.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Data-augmentation experiment with a paired t-test.
    Augment {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("output_dir={}", toml::Value::String(dir.display().to_string())));
    }
    if let Command::Train { iterations: Some(n), .. } = &cli.command {
        overrides.push(format!("training.adversarial_iterations={n}"));
    }
    ExperimentConfig::load(&cli.config, &overrides)
}

fn run(cli: &Cli) -> CliResult<PathBuf> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Preprocess => commands::preprocess(&cfg).map(|_| cfg.output_dir.clone()),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train { resume, .. } => commands::train(&cfg, resume.as_deref()),
        Command::Generate {
            category,
            count,
            source_file,
            mode,
            checkpoint,
            output,
        } => commands::generate(
            &cfg,
            &GenerateArgs {
                checkpoint: checkpoint.as_deref(),
                category: *category,
                count: *count,
                source_file: source_file.as_deref(),
                mode: match mode {
                    Mode::Sample => DecodeMode::Sample,
                    Mode::Argmax => DecodeMode::Argmax,
                },
                output: output.as_deref(),
            },
        ),
        Command::Evaluate { checkpoint } => commands::evaluate(&cfg, checkpoint.as_deref()),
        Command::Augment { checkpoint } => commands::augment(&cfg, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
