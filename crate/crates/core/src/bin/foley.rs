use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use foley_core::config::ExperimentConfig;
use foley_core::pipeline::Run;

#[derive(Parser)]
#[command(
    name = "foley",
    about = "Class-conditional Foley synthesis experiments"
)]
struct Cli {
    /// TOML configuration file layered over the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `ldm.train.loss.lambda=1000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory holding every stage's outputs.
    #[arg(long, default_value = "run", global = true)]
    out: PathBuf,
    /// Run even when an upstream checkpoint was built from a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the training corpus and the reference split.
    MakeData,
    /// Train the contrastive model, the evaluation embedder and reference statistics.
    TrainClap,
    TrainVae,
    TrainLatentClap,
    FinetuneLdm,
    Generate,
    Evaluate,
    /// Fine-tune, generate and evaluate once per λ.
    SweepLambda {
        /// Comma-separated λ values; defaults to `sweep.lambdas`.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    BenchThroughput {
        /// Accepted clips per section; defaults to `bench.clips`.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let text = match &cli.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?,
        ),
        None => None,
    };
    let cfg = ExperimentConfig::load(text.as_deref(), &cli.overrides)?;
    let run = Run::new(cli.out, cfg, cli.force);
    let summary = match cli.command {
        Command::MakeData => run.make_data()?,
        Command::TrainClap => run.train_clap()?,
        Command::TrainVae => run.train_vae()?,
        Command::TrainLatentClap => run.train_latent_clap()?,
        Command::FinetuneLdm => run.finetune_ldm()?,
        Command::Generate => run.generate()?,
        Command::Evaluate => run.evaluate()?,
        Command::SweepLambda { lambdas } => {
            let lambdas = lambdas.unwrap_or_else(|| run.cfg.sweep.lambdas.clone());
            serde_json::to_value(run.sweep_lambda(&lambdas)?)?
        }
        Command::BenchThroughput { clips } => {
            serde_json::to_value(run.bench_throughput(clips.unwrap_or(run.cfg.bench.clips))?)?
        }
        Command::ShowConfig => {
            print!("{}", run.cfg.to_toml()?);
            return Ok(());
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
