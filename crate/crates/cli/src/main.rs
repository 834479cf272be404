//! `nvsm`: generate synthetic data, train, estimate and evaluate poses.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nvsm", version, about = "Few-shot pose estimation by neural view synthesis and matching")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Run the semi-supervised training loop and write a checkpoint.
    Train(TrainArgs),
    /// Estimate poses for one split and write them as CSV.
    Estimate(EstimateArgs),
    /// Estimate poses and write an accuracy report.
    Evaluate(EvaluateArgs),
    /// Retrieval error of synthesised views against azimuth offset.
    DiagnoseMatching(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackgroundArg {
    Noise,
    Gradient,
    Tiles,
    Mixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Labelled,
    Unlabelled,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxesArg {
    Azimuth,
    All,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    labelled: usize,
    #[arg(long, default_value_t = 200)]
    unlabelled: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Fraction of the object bounding box occluded in test images.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    #[arg(long, value_enum, default_value_t = BackgroundArg::Mixed)]
    background: BackgroundArg,
    #[arg(long, default_value_t = 7)]
    texture_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; rewritten after every outer iteration.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path [default: <out>.history.csv].
    #[arg(long)]
    history: Option<PathBuf>,
    /// Continue from the checkpoint at --out if it exists.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 12)]
    outer_iters: usize,
    /// Spacing of synthesised-view offsets, degrees.
    #[arg(long, default_value_t = 10.0)]
    delta_step: f64,
    /// Growth of the offset range per outer iteration, degrees.
    #[arg(long, default_value_t = 10.0)]
    schedule_increment: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Weight of the negative contrastive term.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Moving-average rate of the vertex features.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Pseudo-label score threshold.
    #[arg(long, default_value_t = 0.18)]
    tau: f64,
    #[arg(long, default_value_t = 5)]
    per_view_cap: usize,
    /// Optimiser steps per epoch; 0 runs full epochs.
    #[arg(long, default_value_t = 50)]
    step_cap: usize,
    #[arg(long, value_enum, default_value_t = AxesArg::Azimuth)]
    offset_axes: AxesArg,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Clone, Copy)]
struct ModelArgs {
    /// Feature channels C.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Subdivisions per edge of the model cuboid.
    #[arg(long, default_value_t = 4)]
    subdivisions: usize,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write the per-image estimates here.
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the seed-initialised model the checkpoint started from.
    #[arg(long)]
    untrained: bool,
    #[arg(long, default_value_t = 20)]
    anchors: usize,
    /// Azimuth offsets, degrees.
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60")]
    offsets: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    /// Let an anchor retrieve itself.
    #[arg(long)]
    include_anchor: bool,
}

pub enum Failure {
    Usage(String),
    Data(nvsm::Error),
}

impl From<nvsm::Error> for Failure {
    fn from(e: nvsm::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Estimate(a) => commands::estimate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::DiagnoseMatching(a) => commands::diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
