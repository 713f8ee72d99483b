use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdmix_cli::commands::{self, Command};
use fdmix_cli::config::{parse_override, ConfigError, ExperimentConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "fdmix",
    version,
    about = "Cross-domain few-shot learning with query mixup and disentanglement"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Pretrain and meta-train one model, save best and last checkpoints.
    Train(Shared),
    /// Evaluate the checkpoint named by `eval.checkpoint` on every shard.
    Eval(Shared),
    /// Run a study (pilot_stage, feasibility, ablation_loss, ablation_lambda, baselines).
    Study(Shared),
    /// Finite-difference check of every primitive and the total loss.
    Gradcheck(Shared),
    /// Generate the synthetic datasets and export them under `<out>/data`.
    GenData(Shared),
}

#[derive(Args)]
struct Shared {
    /// JSON config file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for training; a study runs this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Study kind.
    #[arg(long)]
    kind: Option<String>,
    /// `key=value` overrides applied last.
    overrides: Vec<String>,
}

fn build_config(a: &Shared) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut pairs = Vec::new();
    if let Some(d) = &a.out {
        pairs.push(("output.dir".to_string(), Value::String(d.display().to_string())));
    }
    if let Some(s) = a.seed {
        pairs.push(("train.seed".to_string(), Value::from(s)));
        pairs.push(("study.seeds".to_string(), Value::from(vec![s])));
    }
    if let Some(k) = &a.kind {
        pairs.push(("study.kind".to_string(), Value::String(k.clone())));
    }
    for o in &a.overrides {
        pairs.push(parse_override(o)?);
    }
    cfg.apply(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (cmd, shared) = match &cli.command {
        Sub::Train(a) => (Command::Train, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::Study(a) => (Command::Study, a),
        Sub::Gradcheck(a) => (Command::Gradcheck, a),
        Sub::GenData(a) => (Command::GenData, a),
    };
    let cfg = match build_config(shared) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fdmix: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cmd, &cfg) {
        Ok(o) => {
            print!("{}", o.text);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("fdmix {}: {}", cmd.name(), msg.lines().next().unwrap_or(""));
            ExitCode::from(2)
        }
    }
}
