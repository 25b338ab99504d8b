use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rim_cli::commands::{cmd_eval, cmd_reconstruct, cmd_synth, cmd_train, ReconstructOptions};
use rim_cli::{CliResult, Task};

#[derive(Parser)]
#[command(name = "rim", version, about = "Train and run recurrent inference machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Single-threaded, bitwise reproducible run.
        #[arg(long)]
        deterministic: bool,
    },
    /// Score a checkpoint on every image in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// e.g. `denoise:sigma=0.1` or `inpaint:p=0.2,seed=1`.
        #[arg(long)]
        task: Task,
        #[arg(long)]
        images: PathBuf,
        /// Rollout length; defaults to the training length.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Reconstruct one image.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// The input is already corrupted (denoise and sr only).
        #[arg(long)]
        observed: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write every k-th iterate.
        #[arg(long, value_name = "K")]
        filmstrip: Option<usize>,
        /// Noise seed used when corrupting a clean input.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic dead-leaves images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, deterministic } => {
            let (ck, log) = cmd_train(&config, deterministic)?;
            if let Some(v) = log.val.last() {
                println!("trained {} updates; validation psnr {:.3} dB", ck.step, v.psnr_mean);
            }
        }
        Command::Eval { checkpoint, task, images, steps, out, deterministic } => {
            let r = cmd_eval(&checkpoint, &task, &images, steps, &out, deterministic)?;
            println!("{} images: mean psnr {:.3} dB", r.report.rows.len(), r.report.mean_psnr());
        }
        Command::Reconstruct { checkpoint, input, task, out, observed, steps, filmstrip, seed } => {
            let opts = ReconstructOptions { task, observed, steps, filmstrip, seed };
            for path in cmd_reconstruct(&checkpoint, &input, &opts, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Synth { out, count, size, channels, seed } => {
            cmd_synth(&out, count, size, channels, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
