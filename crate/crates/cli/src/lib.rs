//! Command-line front end: `train`, `eval`, `ablate`, `analyze`, `report`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "distillkit", version, about = "Teacher-student distillation runs, evaluation and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the teacher if needed, then train the student.
    Train(RunArgs),
    /// Evaluate a run's best checkpoint on its test split.
    Eval(EvalArgs),
    /// Teacher, student without distillation, student with distillation, per seed.
    Ablate(RunArgs),
    /// Parameter and FLOP counts of a layer graph.
    Analyze(AnalyzeArgs),
    /// Merge finished runs into one comparison table with curves.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; overrides DISTILLKIT_OUT and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub input_hw: Option<Vec<usize>>,
    /// Class-per-directory image tree; switches the data source to folder.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate instead of the run's best.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    /// Full-size G-Ghost student.
    Student,
    /// VGG-16 teacher.
    Teacher,
    DeskStudent,
    DeskTeacher,
    /// A single stage built from the --stage-* flags.
    Stage,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Graph in the text format written by --write.
    pub graph: Option<PathBuf>,
    #[arg(long, conflicts_with = "graph")]
    pub builtin: Option<Builtin>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub input_hw: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    pub stage_n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub stage_lambda: f64,
    #[arg(long, default_value_t = 64)]
    pub stage_channels: usize,
    /// Also save the analyzed graph to this path.
    #[arg(long)]
    pub write: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(&a).map(|_| ()),
        Command::Eval(a) => commands::cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::cmd_ablate(&a).map(|_| ()),
        Command::Analyze(a) => commands::cmd_analyze(&a).map(|text| print!("{text}")),
        Command::Report(a) => commands::cmd_report(&a).map(|_| ()),
    }
}
