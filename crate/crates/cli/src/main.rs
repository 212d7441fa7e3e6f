//! `vsg`: generate data, fit, train, evaluate, predict and plan.
//!
//! Exit status is 0 on success, 1 on a domain error (one `error[kind]: ...`
//! line on stderr) and 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vsg_core::dataset::Split;

#[derive(Debug, Parser)]
#[command(name = "vsg", version, about = "Variable scene graphs: variability prediction and change-detection planning")]
struct Cli {
    /// Log level for progress messages (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    /// Run on one thread instead of the data-parallel path.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene-graph dataset.
    Generate(GenerateArgs),
    /// Fit PCA on the train split of a dataset.
    FitPca(FitPcaArgs),
    /// Train a variability model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Write a scene graph with per-object variability probabilities.
    Predict(PredictArgs),
    /// Plan a change-detection route on one scene.
    Plan(PlanArgs),
    /// Compare Coverage and VSG-Planner over sampled episodes.
    ComparePlanners(CompareArgs),
    /// Convert a 3RScan / 3DSSG export into a dataset directory.
    Ingest(IngestArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Indoor,
    IndoorCluttered,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator spec (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in spec, used when no --spec is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Override the number of environments.
    #[arg(long)]
    pub environments: Option<usize>,
    /// Override the scans per environment.
    #[arg(long)]
    pub scans: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitPcaArgs {
    #[arg(long, default_value_t = 120)]
    pub dim: usize,
    /// Dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training setup (JSON); either the setup itself or a file with a
    /// `model` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// PCA from `fit-pca`, instead of fitting one here.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Edge radius in meters, `pNN` for a percentile, or `inf`.
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = ["delta_vsg", "mlp"])]
    pub architecture: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-type metrics CSV.
    #[arg(long)]
    pub report: PathBuf,
    /// Precision/recall per threshold CSV.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene graph (JSON).
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Previous map (scene graph JSON).
    #[arg(long)]
    pub scene: PathBuf,
    /// Changes to find.
    #[arg(long)]
    pub n: usize,
    /// The scene as it is now; when given, both planners are simulated.
    #[arg(long)]
    pub realized: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// File with a `planner` section; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inclusive range of n, `1..5`, or a single value.
    #[arg(long)]
    pub n_range: Option<String>,
    /// Episodes per n.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Seed for episode sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Summary CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// 3RScan root with 3RScan.json, objects.json and relationships.json.
    #[arg(long)]
    pub root: PathBuf,
    /// Taxonomy (JSON) to map labels onto.
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let exec = commands::execution(cli.sequential);
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::FitPca(a) => commands::fit_pca(a),
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Predict(a) => commands::predict(a),
        Command::Plan(a) => commands::plan(a),
        Command::ComparePlanners(a) => commands::compare_planners(a, exec),
        Command::Ingest(a) => commands::ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, vsg_core::Error::Usage(_)) { 2 } else { 1 };
            let text = e.to_string().replace('\n', " ");
            let prefix = format!("{}: ", e.kind());
            eprintln!("error[{}]: {}", e.kind(), text.strip_prefix(&prefix).unwrap_or(&text));
            ExitCode::from(code)
        }
    }
}
