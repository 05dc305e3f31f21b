mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use emg_allconv::data::SyntheticConfig;
use emg_allconv::Error;

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "EMG_ALLCONV_SEED";

/// Name of the file every command writes next to its outputs.
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "emg-allconv", version, about = "All-ConvNet gesture recognition on HD-sEMG images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train from scratch on every fold of a scenario.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained checkpoint to one fold's target trials.
    Adapt(AdaptArgs),
    /// Score a checkpoint on one fold's test trials.
    Eval(EvalArgs),
    /// Transfusion depth against training epochs.
    Sweep(SweepArgs),
    /// Merge result files into summaries, curves and improvement tables.
    Report(ReportArgs),
    /// Re-run a command from its config echo.
    #[serde(skip)]
    Replay {
        /// A `config.json` written by an earlier run.
        echo: PathBuf,
    },
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to EMG_ALLCONV_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record zero wall time so outputs are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Data {
    #[arg(long)]
    pub manifest: PathBuf,
    /// intra, intersession or intersubject.
    #[arg(long, default_value = "intra")]
    pub scenario: String,
    /// Voting windows in frames, comma separated.
    #[arg(long, default_value = "1,32,64,150,160", value_delimiter = ',')]
    pub windows: Vec<usize>,
    /// Keep every n-th frame of training and adaptation trials.
    #[arg(long, default_value_t = 1)]
    pub train_stride: usize,
    /// Keep every n-th frame of validation trials.
    #[arg(long, default_value_t = 1)]
    pub validation_stride: usize,
    /// Keep every n-th frame of test trials.
    #[arg(long, default_value_t = 1)]
    pub eval_stride: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Optim {
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON synthetic configuration; defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Effective configuration, filled in before the run is echoed.
    #[arg(skip)]
    pub resolved: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: Data,
    #[command(flatten)]
    pub optim: Optim,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FoldSelect {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fold index within the scenario's split.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// T1..T5.
    #[arg(long, default_value = "T5")]
    pub budget: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: Data,
    #[command(flatten)]
    pub optim: Optim,
    #[command(flatten)]
    pub select: FoldSelect,
    /// scratch, finetune-top, feature-extract, transfusion or slim.
    #[arg(long, default_value = "finetune-top")]
    pub mode: String,
    /// Transfusion depth.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: Data,
    #[command(flatten)]
    pub select: FoldSelect,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: Data,
    #[command(flatten)]
    pub optim: Optim,
    #[command(flatten)]
    pub select: FoldSelect,
    /// Depths as `a:b` or a comma list.
    #[arg(long, default_value = "0:8")]
    pub k_range: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Result CSV files; the first is the baseline for comparisons.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Restrict curves to these windows.
    #[arg(long, value_delimiter = ',')]
    pub windows: Vec<usize>,
    /// Dump activation maps of this checkpoint as PGM files.
    #[arg(long, requires = "frame")]
    pub activations: Option<PathBuf>,
    /// Manifest holding the frame to visualize.
    #[arg(long, requires = "activations")]
    pub manifest: Option<PathBuf>,
    /// `subject:session:gesture:trial:frame`.
    #[arg(long, requires = "manifest")]
    pub frame: Option<String>,
}

impl Command {
    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::Synth(a) => Some(&mut a.common),
            Command::Pretrain(a) => Some(&mut a.common),
            Command::Adapt(a) => Some(&mut a.common),
            Command::Eval(a) => Some(&mut a.common),
            Command::Sweep(a) => Some(&mut a.common),
            Command::Report(a) => Some(&mut a.common),
            Command::Replay { .. } => None,
        }
    }

    /// Fixes the seed from the flag, the environment, or 0.
    fn resolve_seed(&mut self) -> Result<(), Error> {
        if let Some(c) = self.common_mut() {
            if c.seed.is_none() {
                c.seed = Some(match std::env::var(SEED_ENV) {
                    Ok(v) => v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?,
                    Err(_) => 0,
                });
            }
        }
        Ok(())
    }
}

pub fn execute(mut command: Command) -> Result<i32, Error> {
    if let Command::Replay { echo } = &command {
        let text = std::fs::read_to_string(echo)?;
        let replayed: Command = serde_json::from_str(&text)?;
        return execute(replayed);
    }
    let seed_given = command
        .common_mut()
        .is_some_and(|c| c.seed.is_some() || std::env::var_os(SEED_ENV).is_some());
    command.resolve_seed()?;
    if let Command::Synth(a) = &mut command {
        if a.resolved.is_none() {
            a.resolved = Some(commands::synth_config(a, seed_given)?);
        }
    }
    let common = command.common_mut().expect("not a replay").clone();
    std::fs::create_dir_all(&common.out)?;
    let echo = serde_json::to_string_pretty(&command)?;
    std::fs::write(common.out.join(CONFIG_ECHO), echo + "\n")?;
    match command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Adapt(a) => commands::adapt(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
        Command::Replay { .. } => unreachable!("handled above"),
    }
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
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
