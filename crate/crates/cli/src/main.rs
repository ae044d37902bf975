use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geopretrain_cli::commands::{self, RunArgs};
use geopretrain_cli::Outcome;

#[derive(Parser)]
#[command(name = "geopretrain", version, about = "Pre-training and fine-tuning for remote-sensing imagery")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Skip the run if `out` already holds a completed run of this config.
    #[arg(long)]
    resume: bool,
}

impl From<Common> for RunArgs {
    fn from(c: Common) -> Self {
        RunArgs {
            config: c.config,
            out: c.out,
            set: c.set,
            print_config: c.print_config,
            resume: c.resume,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Domain-specific pre-training from a generalist checkpoint.
    Pretrain(Common),
    /// Fine-tune for segmentation or detection.
    Finetune(Common),
    /// Score a fine-tuned checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Cross-check the scores against the brute-force implementation.
        #[arg(long)]
        oracle: bool,
    },
    /// Class proportions and resolution summary of a dataset.
    Profile(Common),
    /// Collect results tables into a markdown report.
    Report {
        /// Directories searched recursively for results files.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a pre-trained checkpoint into detector backbone layout.
    ExportBackbone {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a randomly initialized generalist checkpoint.
    InitGeneralist {
        #[arg(long, default_value = "resnet50")]
        backbone: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Pretrain(c) => commands::pretrain(&c.into()),
        Cmd::Finetune(c) => commands::finetune(&c.into()),
        Cmd::Evaluate { common, oracle } => commands::evaluate(&common.into(), oracle),
        Cmd::Profile(c) => commands::profile(&c.into()),
        Cmd::Report { dirs, out } => commands::report(&dirs, &out),
        Cmd::ExportBackbone { checkpoint, out, seed } => commands::export_backbone(&checkpoint, &out, seed),
        Cmd::InitGeneralist { backbone, seed, out } => commands::init_generalist(&backbone, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
