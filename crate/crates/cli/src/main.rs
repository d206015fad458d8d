use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuzzspike::qnet::Variant;
use fuzzspike_cli::{experiment, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "fuzzspike",
    version,
    about = "Train and analyze fuzzy spiking Q-networks on a highway task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `variant` key.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides the `output_dir` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed; writes metrics, checkpoints and a manifest.
    Train(RunArgs),
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the five-variant ablation matrix and summarize it.
    Ablate(RunArgs),
    /// Information capacity of raw, rate-coded and population-coded inputs.
    AnalyzeCapacity {
        #[arg(long, default_value_t = 1)]
        c: u64,
        #[arg(long, default_value_t = 32)]
        h: u64,
        #[arg(long, default_value_t = 32)]
        w: u64,
        #[arg(long, default_value_t = 5)]
        t: u64,
        #[arg(long, default_value_t = 3)]
        n: u64,
        #[arg(long, default_value_t = 5)]
        m: u64,
    },
    /// Multiplication counts of the configured network's stages.
    AnalyzeCost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Sampled membership curves of a checkpoint as CSV.
    PlotMembership {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<&PathBuf>, variant: Option<Variant>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = variant {
        cfg = cfg.with_variant(v);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| fuzzspike_cli::CliError::io(p, e))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load(a.config.as_ref(), a.variant)?;
            let dir = a.out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = experiment::train(&cfg, &dir, a.jobs, &progress)?;
            println!(
                "{} final avg_reward {:.4} ({})",
                report.variant,
                report.final_avg_reward(),
                dir.display()
            );
        }
        Command::Ablate(a) => {
            let cfg = load(a.config.as_ref(), a.variant)?;
            let dir = a.out.unwrap_or_else(|| cfg.output_dir.clone());
            for r in experiment::ablate(&cfg, &dir, a.jobs, &progress)? {
                println!("{} final avg_reward {:.4}", r.variant, r.final_avg_reward());
            }
        }
        Command::Eval {
            config,
            variant,
            checkpoint,
        } => {
            let cfg = load(config.as_ref(), variant)?;
            let m = experiment::evaluate(&cfg, &checkpoint)?;
            println!("episodes,steps,avg_reward,avg_speed,crash_freq");
            println!(
                "{},{},{},{},{}",
                m.episodes, m.steps, m.avg_reward, m.avg_speed, m.crash_freq
            );
        }
        Command::AnalyzeCapacity { c, h, w, t, n, m } => {
            experiment::analyze_capacity(c, h, w, t, n, m, io::stdout().lock())?;
        }
        Command::AnalyzeCost { config, variant } => {
            let cfg = load(config.as_ref(), variant)?;
            experiment::analyze_cost(&cfg, io::stdout().lock())?;
        }
        Command::PlotMembership { checkpoint, out } => {
            experiment::plot_membership(&checkpoint, output(out.as_ref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
