//! Experiment harness: wires data generation, behavior logging, training,
//! multiplier correction, evaluation, baselines, stream serving, and the
//! alpha x K tuning sweep into reproducible commands.
//!
//! Every command is a pure function of its config file plus `--seed`; all
//! artifacts land in `--out-dir` and embed the hash of the effective config.
//! Worker pools (where a command has one) are sized by `CRALLOC_WORKERS`
//! and never change the output, only the wall clock.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cralloc::train::Algo;

mod ops;

#[derive(Parser)]
#[command(name = "cralloc", version, about = "Phased computation-budget allocation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic request set.
    GenData(CommonArgs),
    /// Roll the behavior-policy mix over a dataset into a transition log.
    Collect(CollectArgs),
    /// Fit a Q-network on a transition log.
    Train(TrainArgs),
    /// Search per-slice multipliers until every phase sits on budget.
    Correct(CorrectArgs),
    /// Score a checkpoint on a dataset and append a results-table row.
    Eval(EvalArgs),
    /// Score a reference policy and append a results-table row.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Replay a dataset as a live stream under the feedback controller.
    Serve(ServeArgs),
    /// Train across the alpha x K grid and tabulate the cells.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every section seed (environment, training, CEM).
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Request set to roll; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Scripted policy for mixed logging; defaults to <out-dir>/cem_policy.json.
    #[arg(long, value_name = "FILE")]
    scripted: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training algorithm: ddqn, bcq, or rem. Overrides the config.
    #[arg(long)]
    algo: Option<Algo>,
    /// Force the training-time multiplier updates on or off.
    #[arg(long, value_name = "on|off")]
    adaptive_lambda: Option<OnOff>,
    /// Transition log; defaults to <out-dir>/transitions.jsonl.
    #[arg(long, value_name = "FILE")]
    transitions: Option<PathBuf>,
    /// Evaluation request set; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained policy; defaults to <out-dir>/checkpoint.json.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Evaluation traffic; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained policy; defaults to <out-dir>/checkpoint.json.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Corrected multiplier table; defaults to <out-dir>/lambda_table.csv,
    /// falling back to the checkpoint's training-time multipliers.
    #[arg(long, value_name = "FILE")]
    lambda_table: Option<PathBuf>,
    /// Evaluation request set; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Row label in the results table; defaults to the algorithm name.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Fixed mid-tier rule; anchors normalized score 0.
    Static(BaselineRunArgs),
    /// Global single-multiplier queue allocation on the fixed rule.
    Dcaf(BaselineRunArgs),
    /// Cross-entropy search over linear policies.
    Cem(BaselineRunArgs),
}

#[derive(Args)]
struct BaselineRunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Evaluation request set; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained policy; defaults to <out-dir>/checkpoint.json.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Corrected multiplier table; defaults to <out-dir>/lambda_table.csv,
    /// falling back to the checkpoint's training-time multipliers.
    #[arg(long, value_name = "FILE")]
    lambda_table: Option<PathBuf>,
    /// Traffic scenario; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Transition log; defaults to <out-dir>/transitions.jsonl.
    #[arg(long, value_name = "FILE")]
    transitions: Option<PathBuf>,
    /// Evaluation request set; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Multiplier step sizes to sweep; repeatable. Default grid when absent.
    #[arg(long = "alpha", value_name = "A")]
    alphas: Vec<f64>,
    /// Re-selection rounds to sweep; repeatable. Default grid when absent.
    #[arg(long = "k", value_name = "K")]
    ks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::GenData(args) => ops::gen_data(args),
        Cmd::Collect(args) => ops::collect(args),
        Cmd::Train(args) => ops::train(args),
        Cmd::Correct(args) => ops::correct(args),
        Cmd::Eval(args) => ops::eval(args),
        Cmd::Baseline(BaselineCmd::Static(args)) => ops::baseline_static(args),
        Cmd::Baseline(BaselineCmd::Dcaf(args)) => ops::baseline_dcaf(args),
        Cmd::Baseline(BaselineCmd::Cem(args)) => ops::baseline_cem(args),
        Cmd::Serve(args) => ops::serve(args),
        Cmd::Sweep(args) => ops::sweep(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
