//! `coevo`: generation, execution, reward and evaluation pipelines over
//! line-delimited JSON artifacts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, bad config, or missing inputs. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Some items failed but the rest of the output was written. Exit code 1.
#[derive(Debug)]
pub struct PartialFailure(pub String);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PartialFailure {}

#[derive(Debug, Parser)]
#[command(name = "coevo", version, about = "Code / unit-test co-evolution rewards and evaluation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse raw responses into candidate records.
    Parse(ParseArgs),
    /// Sample candidates from a chat-completions endpoint.
    Generate(GenerateArgs),
    /// Execute code candidates against generated and ground-truth tests.
    Matrix(MatrixArgs),
    /// Compute rewards and advantages from execution matrices.
    Reward(RewardArgs),
    /// Best-of-N report and subsampling grid.
    Bon(BonArgs),
    /// Synthetic experiments on the Bernoulli test model.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// JSONL of {task_id, kind, index, raw[, length_units]}.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// `code` or `test`.
    #[arg(long)]
    pub kind: String,
    /// Candidates file. Existing records are kept and only missing indices are requested.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with provider settings (overrides `[provider]`).
    #[arg(long)]
    pub provider: Option<PathBuf>,
    /// Prompt template with a `{{problem}}` placeholder.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    /// Long reasoning model: lower default temperature.
    #[arg(long)]
    pub long_cot: bool,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Generated tests. Omit for tasks evaluated on ground truth only.
    #[arg(long)]
    pub tests: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub max_output_bytes: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Interpreter command, whitespace separated, with `{program}` for the file.
    #[arg(long)]
    pub command: Option<String>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long)]
    pub matrices: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// theoretical, simple or literal.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub long_cot: bool,
    /// Test candidates file supplying response lengths (needed with --long-cot).
    #[arg(long)]
    pub lengths: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BonArgs {
    #[arg(long)]
    pub matrices: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub m_list: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    pub label: String,
    /// Tasks with reference solutions, for the UT accuracy column.
    #[arg(long, requires = "tests")]
    pub tasks: Option<PathBuf>,
    #[arg(long, requires = "tasks")]
    pub tests: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub experiment: Experiment,
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    #[arg(long, default_value_t = 0.5)]
    pub p_s: f64,
    #[arg(long, default_value_t = 0.8)]
    pub p_u: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p_00: f64,
    #[arg(long, default_value_t = 0.25)]
    pub p_01: f64,
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Precision of the aggregated test reward versus m, with the lower bound.
    Theorem1 {
        #[command(flatten)]
        process: ProcessArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32, 64, 128])]
        m_list: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error of the per-column plug-in estimate of mu versus n.
    Estimators {
        #[command(flatten)]
        process: ProcessArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64, 128, 256, 512])]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace of the synthetic co-evolution loop.
    Coevolve {
        #[arg(long, default_value_t = 0.4)]
        p_s: f64,
        #[arg(long, default_value_t = 0.4)]
        p_u: f64,
        #[arg(long, default_value_t = 0.5)]
        p_00: f64,
        #[arg(long, default_value_t = 0.3)]
        p_01: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        t_q: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = config::PipelineConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Parse(a) => commands::parse(&cfg, a),
        Command::Generate(a) => commands::generate(&cfg, a),
        Command::Matrix(a) => commands::matrix(&cfg, a),
        Command::Reward(a) => commands::reward(&cfg, a),
        Command::Bon(a) => commands::bon(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a.experiment),
    });

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
