//! `nightrain` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::info;
use nightrain::checkpoint::Checkpoint;
use nightrain::config::Config;
use nightrain::{pipeline, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Generate the procedural dataset.
    Synth,
    /// Supervised training on the paired split.
    Pretrain,
    /// Teacher-student fine-tuning on the unlabelled splits.
    Selftrain,
    /// Restore a folder of rainy frames.
    Derain,
    /// Score predictions against references.
    Eval,
}

/// Night-time video deraining with a conditional diffusion model.
///
/// Set NIGHTRAIN_THREADS to cap the worker threads.
#[derive(Debug, Parser)]
#[command(name = "nightrain", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to read: resume point for pretrain, starting point for
    /// selftrain, model for derain.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Input: dataset root (pretrain, selftrain), frame folder (derain) or
    /// pairs manifest (eval).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output: dataset root (synth), checkpoint file (pretrain, selftrain),
    /// frame folder (derain) or report file (eval).
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: Command) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("{cmd:?} needs --{flag}").to_lowercase()))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = Config::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    let data_root = cli.input.clone().unwrap_or_else(|| cfg.data.root.clone());
    match cli.command {
        Command::Synth => {
            let manifest = pipeline::synth(&cfg, cli.output.as_deref())?;
            info!("wrote {} videos", manifest.entries.len());
        }
        Command::Pretrain => {
            let out = cli.output.clone().unwrap_or_else(|| cfg.paths.pretrain_checkpoint.clone());
            let resume = cli
                .checkpoint
                .as_deref()
                .map(|p| Checkpoint::load_for(p, &cfg))
                .transpose()?;
            let outcome = pipeline::pretrain(&cfg, &data_root, resume, &out, seed)?;
            if let Some(last) = outcome.losses.last() {
                info!("final step loss {last:.4}");
            }
            info!("checkpoint written to {}", out.display());
        }
        Command::Selftrain => {
            let from = cli.checkpoint.clone().unwrap_or_else(|| cfg.paths.pretrain_checkpoint.clone());
            let out = cli.output.clone().unwrap_or_else(|| cfg.paths.selftrain_checkpoint.clone());
            let ckpt = Checkpoint::load_for(&from, &cfg)?;
            let outcome = pipeline::selftrain(&cfg, ckpt, &data_root, &out, seed)?;
            info!(
                "{} steps, {} EMA bound violations; checkpoint written to {}",
                outcome.losses.len(),
                outcome.ema_violations,
                out.display()
            );
        }
        Command::Derain => {
            let from = cli.checkpoint.clone().unwrap_or_else(|| cfg.paths.selftrain_checkpoint.clone());
            let input = required(&cli.input, "in", cli.command)?;
            let output = required(&cli.output, "out", cli.command)?;
            let ckpt = Checkpoint::load_for(&from, &cfg)?;
            let frames = pipeline::derain(&cfg, &ckpt, input, output, seed)?;
            info!("wrote {frames} frames to {}", output.display());
        }
        Command::Eval => {
            let input = required(&cli.input, "in", cli.command)?;
            let output = required(&cli.output, "out", cli.command)?;
            let report = pipeline::eval(input, output)?;
            println!(
                "{} clips: mean psnr {:.3} dB, mean ssim {:.4}",
                report.rows.len(),
                report.mean_psnr(),
                report.mean_ssim()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nightrain: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
