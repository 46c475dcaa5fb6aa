use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use molbart::config::OUTPUT_ROOT_ENV;
use molbart::pipeline::{self, record_invocation};
use molbart::{CliError, RunConfig, RunDir};
use serde::Serialize;

/// Denoising sequence-to-sequence pretraining toolkit for SMILES.
#[derive(Debug, Parser)]
#[command(name = "molbart", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.peak_lr=1e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory that relative `run.output_dir` values live under.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Canonicalize and deduplicate the corpus files.
    Dedup,
    /// Train the unigram vocabulary on the deduplicated corpus.
    TokenizerTrain,
    /// Print corrupted training pairs as JSON lines.
    CorruptPreview {
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Denoising pretraining; resumes from the latest checkpoint.
    Pretrain,
    /// Grid-search fine-tuning of every configured task.
    Finetune,
    /// Decode inputs with beam search or sampling.
    Generate {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Test-split metrics of the fine-tuned models.
    Evaluate {
        #[arg(long)]
        task: Option<String>,
    },
    /// Integrated Gradients attributions on test molecules.
    Attribute,
    /// L1-regularized logistic probes on frozen representations.
    Probe,
    /// Fréchet distances between dataset representation clouds.
    Frechet,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Dedup => "dedup",
            Command::TokenizerTrain => "tokenizer-train",
            Command::CorruptPreview { .. } => "corrupt-preview",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Attribute => "attribute",
            Command::Probe => "probe",
            Command::Frechet => "frechet",
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::ConfigInvalid("--config is required".into()))?;
    let cfg = RunConfig::load(&path, &cli.overrides, cli.output_root.as_deref())?;
    let rd = RunDir::new(cfg.run.output_dir.clone());
    record_invocation(&cfg, &rd, cli.command.name())?;
    match cli.command {
        Command::Dedup => print_json(&pipeline::cmd_dedup(&cfg, &rd)?),
        Command::TokenizerTrain => print_json(&pipeline::cmd_tokenizer_train(&cfg, &rd)?),
        Command::CorruptPreview { n } => {
            let stdout = std::io::stdout();
            pipeline::cmd_corrupt_preview(&cfg, &rd, n, &mut stdout.lock()).map(|_| ())
        }
        Command::Pretrain => print_json(&pipeline::cmd_pretrain(&cfg, &rd)?),
        Command::Finetune => {
            let reports = pipeline::cmd_finetune(&cfg, &rd)?;
            let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
            print_json(&serde_json::json!({ "tasks": names, "output": rd.root.join("finetune") }))
        }
        Command::Generate { input } => {
            let lines = pipeline::cmd_generate(&cfg, &rd, input.as_deref())?;
            print_json(&serde_json::json!({ "inputs": lines.len(), "output": rd.file(&["generate", "generations.jsonl"]) }))
        }
        Command::Evaluate { task } => print_json(&pipeline::cmd_evaluate(&cfg, &rd, task.as_deref())?),
        Command::Attribute => {
            let r = pipeline::cmd_attribute(&cfg, &rd)?;
            let worst = r.molecules.iter().map(|m| m.completeness_error).fold(0.0f64, f64::max);
            print_json(&serde_json::json!({
                "task": r.task,
                "molecules": r.molecules.len(),
                "skipped": r.skipped.len(),
                "max_completeness_error": worst,
            }))
        }
        Command::Probe => {
            let r = pipeline::cmd_probe(&cfg, &rd)?;
            print_json(&serde_json::json!({ "label": r.label, "curve": r.curve }))
        }
        Command::Frechet => print_json(&pipeline::cmd_frechet(&cfg, &rd)?),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::ConfigInvalid(e.to_string())),
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(&e),
        Err(_) => {
            eprintln!("{}", serde_json::json!({ "error": "internal", "message": "panic", "exit_code": 2 }));
            ExitCode::from(2)
        }
    }
}
