//! `kgagent`: data preparation, rule mining, episodes, self-learning and
//! evaluation over a knowledge graph.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "kgagent", version, about = "Rule-guided tool-calling agent over knowledge graphs")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every sampled decision.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log filter, e.g. `warn`, `info` or `kgagent=debug`. Logs go to stderr.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a TSV graph, deduplicate it and write it back in canonical form.
    BuildKg(BuildKgArgs),
    /// Remove a share of the shortest-path triples of the questions.
    MakeIncomplete(MakeIncompleteArgs),
    /// Mine rule bodies for the planner's demonstration pool.
    MineRules(MineRulesArgs),
    /// Run one episode per question and record trajectories.
    RunAgent(RunAgentArgs),
    /// Iterate exploration, refinement, merging and training.
    Selflearn(SelflearnArgs),
    /// Score trajectories against gold answers.
    Evaluate(EvaluateArgs),
    /// Add extracted triples to a graph.
    CommitTriples(CommitTriplesArgs),
    /// Write a synthetic dataset with known answer paths.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildKgArgs {
    /// Input TSV.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// Output TSV; defaults to `<output>/kg.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeIncompleteArgs {
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Share of the path-triple union to remove, in (0, 1].
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Directory for `kg.tsv` and `removed.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineRulesArgs {
    /// Graph to mine on; normally the complete one.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// Seed questions; defaults to `train_questions`, then `questions`.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Rule bodies kept per question.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output JSONL; defaults to `demonstrations`, then `<output>/demonstrations.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Http,
    Scripted,
    Replay,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Document JSONL for `wikiSearch`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Demonstrations JSONL from `mine-rules`.
    #[arg(long)]
    pub demonstrations: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<BackendArg>,
    /// Script JSONL for the scripted policy.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Trajectory JSONL for the replay policy.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Chat-completions endpoint for the http policy.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Demonstrations per planner prompt.
    #[arg(long)]
    pub k: Option<usize>,
    /// Ask for a plan before the first step.
    #[arg(long)]
    pub plan_on_reset: bool,
    /// Parallel episodes.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunAgentArgs {
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainerArg {
    /// Store surviving trajectories and replay them.
    Replay,
    /// Run `--train-program` and serve the checkpoint it reports.
    Command,
}

#[derive(Debug, Args)]
pub struct SelflearnArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Validation questions; defaults to the training questions.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Minimum Hits@1 gain in percentage points to keep iterating.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Validate the initial policy too, so the first round is measured against it.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, value_enum, default_value = "replay")]
    pub trainer: TrainerArg,
    #[arg(long)]
    pub train_program: Option<String>,
    /// Argument for the train program; `{sft}`, `{out}` and `{iteration}` are substituted.
    #[arg(long = "train-arg", allow_hyphen_values = true)]
    pub train_args: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Trajectory JSONL to score.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Graph for the path-coverage report.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Directory for `metrics.csv`, `errors.tsv` and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CommitTriplesArgs {
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// TSV of triples to add.
    #[arg(long)]
    pub triples: PathBuf,
    /// Output TSV; defaults to overwriting `--kg`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub questions: usize,
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    #[arg(long, default_value_t = 1)]
    pub max_answers: usize,
    #[arg(long, default_value_t = 0)]
    pub unreachable: usize,
    #[arg(long, default_value_t = 30)]
    pub noise_entities: usize,
    #[arg(long, default_value_t = 60)]
    pub noise_triples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let filter = match EnvFilter::try_new(&cli.log_level) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: invalid --log-level `{}`: {e}", cli.log_level);
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error());
            ExitCode::from(e.code())
        }
    }
}
