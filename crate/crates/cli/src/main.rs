mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const PRECEDENCE: &str = "Settings are resolved in order: command-line flags override values from \
--config, which override the defaults of the dataset's preset (or the built-in defaults when the \
dataset was not generated from a preset).";

#[derive(Parser, Debug)]
#[command(name = "netresil", version, about = "Joint node-state and topology learning on temporal graphs", after_help = PRECEDENCE)]
pub struct Cli {
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic temporal graph dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out edges and next states.
    Eval(EvalArgs),
    /// Run node-removal attacks on the ground-truth dynamics or a trained model.
    Attack(AttackArgs),
}

#[derive(Args, Debug)]
#[command(after_help = PRECEDENCE)]
pub struct GenerateArgs {
    /// Named preset (see `--list-presets`).
    #[arg(long, conflicts_with = "config", required_unless_present_any = ["config", "list_presets"])]
    pub preset: Option<String>,
    /// Generator configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long, required_unless_present = "list_presets")]
    pub out: Option<PathBuf>,
    /// Override the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Print the preset names and exit.
    #[arg(long)]
    pub list_presets: bool,
}

#[derive(Args, Debug)]
#[command(after_help = PRECEDENCE)]
pub struct TrainArgs {
    /// Dataset directory (falls back to `dataset` in the config file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training configuration JSON; may be partial.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Number of snapshots per input window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Negative-sampling seeds, one run per seed (defaults to the training seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Which edge split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Edge probability threshold.
    #[arg(long, default_value_t = netresil_core::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Dataset directory. Without `--ckpt` the dataset's generating dynamics are simulated.
    #[arg(long)]
    pub data: PathBuf,
    /// Attack a trained model instead of the ground-truth dynamics.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Fractions of nodes to remove.
    #[arg(long, value_delimiter = ',', default_values_t = netresil_core::eval::DEFAULT_FRACTIONS.to_vec())]
    pub fractions: Vec<f64>,
    /// Attack seed (defaults to the dataset's generator seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Integration step for simulated attacks.
    #[arg(long, default_value_t = netresil_core::dynamics::DEFAULT_DT)]
    pub dt: f64,
    /// Simulated time horizon.
    #[arg(long, default_value_t = netresil_core::dynamics::DEFAULT_T_END)]
    pub t_end: f64,
    /// Record every k-th integration step in the curves.
    #[arg(long, default_value_t = 10)]
    pub sample_every: usize,
    /// Autoregressive prediction steps for checkpoint attacks.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Output CSV of mean-state curves.
    #[arg(long)]
    pub out: PathBuf,
    /// Output JSON of verdicts (defaults to the CSV path with a .json extension).
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
