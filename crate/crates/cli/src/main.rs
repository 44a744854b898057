//! `forma`: training, inference, evaluation, complexity and robustness commands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forma_core::config::Scale;
use forma_core::Variant;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "forma", version, about = "Vision state-space tampering localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the matching `--config` field.
#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper | toy
    #[arg(long)]
    scale: Option<Scale>,
    /// full | no_noise | no_shuffle | noise_into_encoder | no_dice | no_focal
    #[arg(long)]
    variant: Option<Variant>,
    /// Decision threshold on the tampering probability.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic tampered images.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Size of the synthetic training set.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        no_augment: bool,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a probability map and a mask for each image.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Weights; a seeded random model is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run at native resolution instead of resizing to the model input size.
        #[arg(long)]
        native: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score a manifest: per-dataset and weighted-average F1 / IoU.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        native: bool,
    },
    /// Parameter and FLOP counts with a per-layer breakdown.
    Complexity {
        #[command(flatten)]
        common: Common,
        /// Input size as HxW; repeatable. Defaults to the model input size.
        #[arg(long = "size")]
        sizes: Vec<String>,
        #[arg(long)]
        flops_per_mac: Option<u64>,
    },
    /// Sweep post-processing perturbations over a manifest.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        native: bool,
        /// `kind:s1,s2,...` with kind one of jpeg_quality, gaussian_blur,
        /// gaussian_noise, resize; repeatable.
        #[arg(long = "grid")]
        grid: Vec<String>,
    },
}

/// Merges the config file (if any) with explicit flags.
fn run_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.scale {
        cfg.scale = v;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(v) = c.tau {
        cfg.tau = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(forma_core::Error::Usage(format!("tau {} outside [0, 1]", cfg.tau)).into());
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| forma_core::Error::Usage(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            common,
            steps,
            epochs,
            batch_size,
            samples,
            lr,
            no_augment,
            resume,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(v) = steps {
                cfg.steps = v;
                cfg.epochs = None;
            }
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = samples {
                cfg.samples = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if no_augment {
                cfg.augment = false;
            }
            commands::train(&cfg, resume.as_deref())
        }
        Command::Infer {
            common,
            checkpoint,
            native,
            images,
        } => {
            let mut cfg = run_config(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            commands::infer(&cfg, &images, native)
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
            native,
        } => {
            let mut cfg = run_config(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.manifest = manifest.or(cfg.manifest);
            commands::eval(&cfg, native)
        }
        Command::Complexity {
            common,
            sizes,
            flops_per_mac,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(v) = flops_per_mac {
                cfg.flops_per_mac = v;
            }
            commands::complexity(&cfg, &sizes, common.out.is_some())
        }
        Command::Robustness {
            common,
            manifest,
            checkpoint,
            native,
            grid,
        } => {
            let mut cfg = run_config(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.manifest = manifest.or(cfg.manifest);
            commands::robustness(&cfg, &grid, native)
        }
    }
}

/// 1 usage, 2 data, 3 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(fe) = cause.downcast_ref::<forma_core::Error>() {
            return match fe {
                forma_core::Error::Usage(_) => 1,
                forma_core::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
