//! Command-line front end over the pipeline stage drivers.
//!
//! Every subcommand reads the same JSON run configuration (defaults apply to
//! any field the file leaves out) and operates on the run directory it names.
//! Exit codes: 0 on success, 1 for configuration or data errors, 2 for usage
//! errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use editfield::pipeline::{self, RunConfig, METRICS_HEADER};

#[derive(Parser)]
#[command(name = "editfield", about = "Instruction-driven editing of neural scene representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Renders the training dataset for the configured scene.
    GenData,
    /// Trains the image autoencoder.
    TrainAe,
    /// Trains the latent denoiser against the frozen autoencoder.
    TrainDiffusion,
    /// Trains the caption and image embedding space.
    TrainEmbed,
    /// Stage 1: trains the bottleneck shift and samples edited views.
    TrainDelta,
    /// Stage 2: fits the radiance field to the edited views.
    TrainNerf,
    /// Re-renders evaluation outputs from saved checkpoints.
    Render,
    /// Computes metrics and appends a row to metrics.csv.
    Eval,
    /// Runs full, no-consistency, and zero-shift variants under one seed.
    Ablate,
    /// All stages in order, then evaluation.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn stage(name: &str, f: impl FnOnce() -> Result<()>) -> Result<()> {
    eprintln!("[{}] running", name);
    f()?;
    eprintln!("[{}] done", name);
    Ok(())
}

fn print_report(report: &pipeline::MetricsReport) {
    println!("{}", METRICS_HEADER);
    println!("{}", report.csv_row());
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match cli.command {
        Command::GenData => stage("gen-data", || pipeline::cmd_gen_data(&config)),
        Command::TrainAe => stage("train-ae", || pipeline::cmd_train_ae(&config)),
        Command::TrainDiffusion => {
            stage("train-diffusion", || pipeline::cmd_train_diffusion(&config))
        }
        Command::TrainEmbed => stage("train-embed", || pipeline::cmd_train_embed(&config)),
        Command::TrainDelta => stage("train-delta", || pipeline::cmd_train_delta(&config)),
        Command::TrainNerf => stage("train-nerf", || pipeline::cmd_train_nerf(&config)),
        Command::Render => stage("render", || pipeline::cmd_render(&config)),
        Command::Eval => {
            let report = pipeline::cmd_eval(&config)?;
            print_report(&report);
            Ok(())
        }
        Command::Ablate => {
            let rows = pipeline::cmd_ablate(&config)?;
            println!("{}", pipeline::ABLATION_HEADER);
            for (name, report) in &rows {
                println!(
                    "{},{},{},{},{},{},{}",
                    name,
                    report.seed,
                    report.direction_similarity,
                    report.direction_consistency,
                    report.embedding_std,
                    report.psnr_vs_oracle,
                    report.frechet_after
                );
            }
            Ok(())
        }
        Command::RunAll => {
            let report = pipeline::cmd_run_all(&config)?;
            print_report(&report);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: building thread pool: {}", e);
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
