//! `rtgauntlet <stage> [--config FILE] [--seed N] [--out DIR] [key=value ...]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtgauntlet::harness::{Experiment, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "rtgauntlet", version, about = "Train, attack and evaluate random-transformation defenses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone through the defense's transforms.
    Train(Common),
    /// Adversarially train the RT model (pre-trains clean when needed).
    AdvTrain(Common),
    /// Craft adversarial examples for every variant and archive them.
    Attack(Common),
    /// Evaluate archived adversarial examples over repeated defense runs.
    Evaluate(Common),
    /// Bayesian-optimisation search over the transform hyperparameters.
    Tune(Common),
    /// Train BPDA surrogates for the defense's non-differentiable kinds.
    BpdaTrain(Common),
    /// Gradient-spread statistics per input and objective.
    Diagnose(Common),
    /// Summarise results.csv as a Markdown table.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Dotted overrides such as `attack.steps=200`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Command {
    fn split(self) -> (Stage, Common) {
        match self {
            Command::Train(c) => (Stage::Train, c),
            Command::AdvTrain(c) => (Stage::AdvTrain, c),
            Command::Attack(c) => (Stage::Attack, c),
            Command::Evaluate(c) => (Stage::Evaluate, c),
            Command::Tune(c) => (Stage::Tune, c),
            Command::BpdaTrain(c) => (Stage::BpdaTrain, c),
            Command::Diagnose(c) => (Stage::Diagnose, c),
            Command::Report(c) => (Stage::Report, c),
        }
    }
}

fn run(stage: Stage, args: Common) -> rtgauntlet::Result<()> {
    let mut overrides = args.overrides;
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml_with("", &overrides)?,
    };
    let exp = Experiment::new(cfg, args.out)?;
    exp.run(stage)?;
    if stage == Stage::Report {
        print!("{}", std::fs::read_to_string(exp.out.join("report.md"))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (stage, args) = Cli::parse().command.split();
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{stage} failed: {e}");
            ExitCode::FAILURE
        }
    }
}
