mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(
        "output directory is locked by another command ({0}); remove it if no command is running"
    )]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sandbox(#[from] agentrl::sandbox::SandboxError),
    #[error(transparent)]
    Orchestrator(#[from] agentrl::orchestrator::OrchestratorError),
    #[error(transparent)]
    Params(#[from] agentrl::policy::ParamsError),
    #[error(transparent)]
    Merge(#[from] agentrl::merge::MergeError),
    #[error(transparent)]
    Select(#[from] agentrl::tts::TtsError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "agentrl",
    version,
    about = "Agentic RL harness: rollouts, GRPO training, merging, selection and benchmarking"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Colocated,
    Disaggregated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Majority,
    Logprob,
    Confidence,
    Knockout,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect candidate pools and trajectory logs.
    Rollout {
        #[arg(long, default_value_t = 1)]
        prompts: usize,
        /// Samples per prompt.
        #[arg(long = "group-size", short = 'g', default_value_t = 4)]
        group_size: usize,
    },
    /// Run RL training and write checkpoints and metrics.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fuse fine-tuned checkpoints into one.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long, value_parser = ["unanimity", "majority"])]
        rule: Option<String>,
        #[arg(long, value_parser = ["per_matrix", "whole_model"])]
        scope: Option<String>,
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// Pick one candidate from a pool file.
    Select {
        pool: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, value_parser = ["agent_response", "environment_feedback", "all"])]
        role_filter: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Select the lowest trace confidence.
        #[arg(long)]
        invert_confidence: bool,
        #[arg(long)]
        group_size: Option<usize>,
        /// HTTP judge for knockout; without it the higher mean log-probability wins.
        #[arg(long)]
        judge_url: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        judge_timeout_ms: u64,
    },
    /// Compare colocated and disaggregated throughput on the same latency model.
    Bench {
        #[arg(long)]
        steps: Option<usize>,
        /// Fraction of leading updates excluded from the throughput.
        #[arg(long, default_value_t = 0.1)]
        warmup: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match cli.command {
        Command::Rollout {
            prompts,
            group_size,
        } => commands::rollout(c, prompts, group_size),
        Command::Train { mode, steps } => commands::train(c, mode, steps),
        Command::Merge {
            base,
            out,
            top_p,
            rule,
            scope,
            models,
        } => commands::merge(c, &base, &out, top_p, rule, scope, &models),
        Command::Select {
            pool,
            strategy,
            role_filter,
            k,
            invert_confidence,
            group_size,
            judge_url,
            judge_timeout_ms,
        } => {
            let opts = commands::SelectOpts {
                strategy,
                role_filter,
                k,
                invert_confidence,
                group_size,
                judge_url,
                judge_timeout_ms,
            };
            commands::select(c, &pool, opts)
        }
        Command::Bench { steps, warmup } => commands::bench(c, steps, warmup),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
