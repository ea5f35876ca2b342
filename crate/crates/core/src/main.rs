use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rgba_dit::cli::{self, ExperimentConfig, Phase};
use rgba_dit::Result;

#[derive(Parser)]
#[command(name = "rgba-dit", version, about = "Joint RGB + alpha video diffusion at desk scale")]
struct Args {
    /// TOML experiment config. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.depth=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic RGBA dataset into <output_dir>/dataset.
    GenDataset,
    /// Pretrain the RGB base model or fine-tune it for RGBA.
    Train {
        #[arg(value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Base checkpoint for fine-tuning (default <output_dir>/base.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one video from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        cond_id: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Integration steps (default: sampler.steps from the config).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score video directories with the flow-difference and IoU metrics.
    Eval {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Run every design and mask variant from one base checkpoint.
    Ablate {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

fn run(args: Args) -> Result<bool> {
    let config = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    match args.command {
        Command::GenDataset => {
            let (index, _) = cli::gen_dataset(&config)?;
            println!("{} scenes in {} ({})", index.scenes.len(), config.dataset_dir().display(), index.content_hash);
        }
        Command::Train { phase, dataset, base, out } => {
            let phase = match phase {
                PhaseArg::Pretrain => Phase::Pretrain,
                PhaseArg::Finetune => Phase::Finetune,
            };
            let o = cli::train(&config, phase, dataset.as_deref(), base.as_deref(), out.as_deref())?;
            println!("{} ({})", o.checkpoint.display(), o.checkpoint_hash);
        }
        Command::Sample { checkpoint, cond_id, seed, steps, out } => {
            let o = cli::sample(&config, &checkpoint, cond_id, seed, steps, &out)?;
            println!("{} ({})", out.display(), o.hash);
        }
        Command::Eval { inputs, out } => {
            let (record, _) = cli::eval(&config, &inputs, &out)?;
            let iou = record.mean_iou.map_or("undefined".into(), |v| format!("{v:.4}"));
            println!("{} videos: flow difference {:.4}, IoU {iou}", record.videos.len(), record.mean_flow_difference);
        }
        Command::Ablate { base } => {
            let (report, _) = cli::ablate(&config, base.as_deref())?;
            print!("{}", report.to_markdown());
            return Ok(!report.failed());
        }
        Command::ShowConfig => print!("{}", config.to_toml()?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
