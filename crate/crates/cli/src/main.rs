//! `agrimae`: generate synthetic data, train, detect anomalies and score them.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use agrimae_core::config::Switch;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "agrimae", version, about = "Masked-autoencoder anomaly segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images, labels, index.txt).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory and save a checkpoint.
    Train(TrainArgs),
    /// Compute error maps, thresholds and anomaly maps.
    Infer(InferArgs),
    /// Score anomaly maps against ground-truth labels.
    Eval(EvalArgs),
    /// Run the gradient and oracle checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 0.0)]
    pub anomaly_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    #[arg(long)]
    pub exclude_anomalous: bool,
    #[arg(long)]
    pub asl: Option<Switch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A single `.aten` image or a dataset directory with `index.txt`.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value = "on")]
    pub stratified: Switch,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Dataset directory holding `index.txt` and `labels/`.
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "pooled")]
    pub iou_mode: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let seed_override = match commands::env_seed() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, seed_override),
        Command::Train(a) => commands::train(a, seed_override),
        Command::Infer(a) => commands::infer(a, seed_override),
        Command::Eval(a) => commands::eval(a),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
