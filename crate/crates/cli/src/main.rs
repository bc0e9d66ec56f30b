//! `sff`: train and analyze stochastic forward-forward networks.

mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sff", version, about = "Stochastic forward-forward training and analysis")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key.path=value` overrides applied after the file, in order.
    #[arg(long, global = true, num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory receiving every artifact of the invocation.
    #[arg(long, global = true, default_value = "runs/default")]
    pub output_dir: PathBuf,
    /// Element type of new runs (checkpoints keep their own).
    #[arg(long, global = true, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyArg {
    MeanSquare,
    Mean,
    Direct,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Check that the configured dataset is present and well formed.
    PrepareData,
    /// Train (or resume) a network and write its checkpoint and metrics.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy of a trained network under each class-score rule.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, num_args = 1..)]
        strategy: Vec<StrategyArg>,
        /// Skip writing the per-input scores container.
        #[arg(long)]
        no_dump: bool,
    },
    /// Effective dimensionality of every block's output.
    AnalyzeEd {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Linear readouts trained on each block of a frozen network.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// 1-based block numbers; all blocks when omitted.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
    },
    /// Information carried by each block's readout, split into linear,
    /// signal-similarity and correlation parts.
    AnalyzeInfo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
        /// Monte-Carlo samples per mixture component.
        #[arg(long, default_value_t = stochff::analysis::DEFAULT_MC_SAMPLES)]
        mc_samples: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Train one block per trade-off value and score its kernels.
    SweepAlpha {
        /// `start:stop:step`, inclusive.
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        /// 1-based block whose kernels are scored.
        #[arg(long, default_value_t = 1)]
        block: usize,
    },
    /// Write an image grid of inputs under increasing dropout.
    DumpNoisy {
        #[arg(long, default_value = "0:0.5:0.05")]
        p_grid: String,
        /// Number of validation images (rows).
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Pixel magnification.
        #[arg(long, default_value_t = 2)]
        scale: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}
