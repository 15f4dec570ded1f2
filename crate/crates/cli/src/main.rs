//! `gpp`: dataset synthesis, prior extraction, codec and diffusion training,
//! enhancement, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpp_core::net::Ablation;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<gpp_core::CoreError> for Failure {
    fn from(e: gpp_core::CoreError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "gpp", version, about = "Prior-guided latent diffusion for low-light enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct ProviderArgs {
    /// builtin, or http (reads GPP_VLM_URL, GPP_VLM_KEY, GPP_VLM_MODEL).
    #[arg(long)]
    pub provider: Option<String>,
    /// Prior sidecar cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Concurrent provider requests per image.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic normal/low-light pairs.
    MakeDataset {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compute prior sidecars for an image, a directory of images or a dataset.
    ExtractPriors {
        #[arg(long)]
        input: PathBuf,
        /// Cache directory receiving one JSON sidecar per image.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the latent codec on a dataset's images.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the pixel-space identity codec instead of training one.
        #[arg(long)]
        identity: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the noise predictor.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Codec file from train-ae.
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Run directory for the checkpoint, log and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Continue from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Enhance one image or every image in a directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR of inputs and enhanced outputs on held-out pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Images evaluated concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable op and the full network (f64).
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::MakeDataset { n, size, out, force, common } => commands::make_dataset(n, size, &out, force, &common),
        Command::ExtractPriors { input, out, grid, provider, parallelism, common } => {
            commands::extract_priors(&input, &out, grid, provider, parallelism, &common)
        }
        Command::TrainAe { data, out, epochs, identity, common } => commands::train_ae(&data, &out, epochs, identity, &common),
        Command::Train { data, ae, out, iterations, ablation, ckpt, common } => {
            commands::train(&data, ae.as_deref(), &out, iterations, ablation, ckpt.as_deref(), &common)
        }
        Command::Enhance { ckpt, input, out, steps, provider, common } => {
            commands::enhance(&ckpt, &input, &out, steps, &provider, &common)
        }
        Command::Eval { ckpt, data, out, steps, threads, provider, common } => {
            commands::eval(&ckpt, &data, &out, steps, threads, &provider, &common)
        }
        Command::Gradcheck { seeds, common } => commands::gradcheck(seeds, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
