//! `kprune`: prune, evaluate and inspect encoder classifiers.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kprune::knowledge::Criterion;

#[derive(Parser)]
#[command(
    name = "kprune",
    version,
    about = "Retraining-free structured pruning of encoder classifiers"
)]
struct Cli {
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a model to a FLOPs budget and write it with a JSON report.
    Prune(PruneArgs),
    /// Accuracy and mean loss of a model on labeled samples.
    Eval(EvalArgs),
    /// Prune and evaluate once per value of one hyperparameter; writes CSV.
    Sweep(SweepArgs),
    /// Print the FLOPs breakdown of a model.
    Flops(FlopsArgs),
    /// Write per-unit knowledge and scores of an unpruned model as CSV.
    Score(ScoreArgs),
    /// Generate a random toy model and labeled samples.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Kpruning,
    MagnitudeGradient,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Kpruning => Criterion::KPruning,
            CriterionArg::MagnitudeGradient => Criterion::MagnitudeGradient,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Gamma,
    Lambda,
    Mu,
}

impl Param {
    fn name(self) -> &'static str {
        match self {
            Param::Gamma => "gamma",
            Param::Lambda => "lambda",
            Param::Mu => "mu",
        }
    }
}

#[derive(Args)]
struct Inputs {
    /// Model container (.kpz).
    #[arg(long)]
    model: PathBuf,
    /// Labeled samples, one JSON object per line.
    #[arg(long)]
    samples: PathBuf,
    /// Use at most this many samples, drawn with --seed.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Budget {
    /// Fraction of prunable FLOPs to keep.
    #[arg(long)]
    keep_flops: Option<f64>,
    /// Fraction of prunable FLOPs to remove.
    #[arg(long)]
    target_compression: Option<f64>,
}

#[derive(Args)]
struct Hyper {
    /// Distillation temperature.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Weight of representational knowledge.
    #[arg(long, default_value_t = 0.00025)]
    lambda: f64,
    /// Extra weight on attention head scores.
    #[arg(long, default_value_t = 64.0)]
    mu: f64,
    #[arg(long, value_enum, default_value_t = CriterionArg::Kpruning)]
    criterion: CriterionArg,
    /// Check the budget against total committed FLOPs instead of the
    /// remaining budget.
    #[arg(long)]
    kpms_global: bool,
    /// Select everything from one measurement and skip reconstruction.
    #[arg(long)]
    one_shot: bool,
    /// Keep reconstructed weights in f64 instead of rounding to f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    budget: Budget,
    #[command(flatten)]
    hyper: Hyper,
    /// Output container.
    #[arg(long)]
    out: PathBuf,
    /// Report path (default: the output path with a .json extension).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Also report the mean KL divergence to this model's predictions.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    budget: Budget,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, value_enum)]
    param: Param,
    /// Comma-separated values for --param.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
    /// Held-out samples for evaluation (default: --samples).
    #[arg(long)]
    eval_samples: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    hyper: Hyper,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output container.
    #[arg(long)]
    out: PathBuf,
    /// Output samples, labeled with the model's own predictions.
    #[arg(long)]
    samples_out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    head_dim: usize,
    #[arg(long, default_value_t = 8)]
    neurons: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Duplicate every unit, giving the copy this share of the output.
    #[arg(long)]
    plant: Option<f64>,
    /// Extra random heads per layer.
    #[arg(long, default_value_t = 0)]
    noise_heads: usize,
    /// Extra random neurons per layer.
    #[arg(long, default_value_t = 0)]
    noise_neurons: usize,
    /// Output projection scale of the extra units.
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Prune(a) => commands::prune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Flops(a) => commands::flops(a),
        Command::Score(a) => commands::score(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
