//! Command-line surface: train, eval, analyze, generate, inspect.
//!
//! Exit codes are stable API: 1 config error, 2 data error, 3 NaN
//! abort during training, 4 bad checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitgnn::aggregators::AggregatorKind;
use bitgnn::analyze;
use bitgnn::config::{ModelConfig, TaskKind};
use bitgnn::data::{self, Dataset, Split, TopologyPairsSpec};
use bitgnn::model::CkptError;
use bitgnn::train::{self, TrainError};
use bitgnn::{Real, RealDataset, RealModel};

#[derive(Parser)]
#[command(name = "bitgnn", about = "1-bit graph neural networks with learnable meta-aggregators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset, printing one metric per split.
    Eval(EvalArgs),
    /// Enumerate multiset collision verdicts into a CSV report.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset in GTXT format.
    Generate(GenerateArgs),
    /// Print the serialized-size breakdown of a checkpoint or config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value model configuration file
    #[arg(long)]
    config: PathBuf,
    /// GTXT dataset
    #[arg(long)]
    data: PathBuf,
    /// checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// metric log CSV output path
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// largest multiset size to enumerate (guard: 6)
    #[arg(long, default_value_t = 4)]
    max_size: usize,
    /// inclusive integer value range, lo:hi (guard: 9 values)
    #[arg(long, default_value = "-2:2", allow_hyphen_values = true)]
    range: String,
    /// CSV output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// pairs | regression
    #[arg(long)]
    kind: String,
    /// GTXT output path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// graphs per class (pairs) or total graphs (regression)
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// star generator: largest center in-degree to mine
    #[arg(long, default_value_t = 4)]
    max_degree: usize,
    /// star generator: leaf value range lo:hi
    #[arg(long, default_value = "-2:2", allow_hyphen_values = true)]
    range: String,
    /// star generator: comma-separated aggregators that must collide
    #[arg(long, default_value = "mean")]
    collide: String,
    /// star generator: aggregator that must separate the classes
    #[arg(long, default_value = "sum")]
    separate: String,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum CliError {
    Config(String),
    Data(String),
    NanAbort(String),
    Ckpt(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::NanAbort(_) => 3,
            Self::Ckpt(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Data(m) | Self::NanAbort(m) | Self::Ckpt(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Self::NanAbort(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        Self::Ckpt(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Inspect(args) => cmd_inspect(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn parse_range(s: &str) -> Result<(i64, i64), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(CliError::Config(format!("range must be lo:hi, got {s:?}")));
    }
    let lo = parts[0]
        .parse()
        .map_err(|_| CliError::Config(format!("bad range bound {:?}", parts[0])))?;
    let hi = parts[1]
        .parse()
        .map_err(|_| CliError::Config(format!("bad range bound {:?}", parts[1])))?;
    Ok((lo, hi))
}

fn read_config(path: &Path) -> Result<ModelConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    ModelConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn load_dataset(path: &Path, config: &ModelConfig) -> Result<RealDataset, CliError> {
    let graphs = data::load_gtxt::<Real>(path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Dataset::new(graphs, config.task, config.seed))
}

/// Resolves the model input/output widths from config and data; the
/// data wins, explicit config values must agree.
fn resolve_dims(config: &ModelConfig, ds: &RealDataset) -> Result<(usize, usize), CliError> {
    if ds.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    let feat = ds.feat_dim();
    if config.feat_dim != 0 && config.feat_dim != feat {
        return Err(CliError::Data(format!(
            "config feat_dim={} but data has {feat}",
            config.feat_dim
        )));
    }
    let out = match config.task {
        TaskKind::GraphRegression => ds
            .target_width()
            .ok_or_else(|| CliError::Data("regression data has no targets".into()))?,
        TaskKind::GraphClassification => ds
            .num_classes()
            .ok_or_else(|| CliError::Data("classification data has no integer classes".into()))?,
    };
    if config.out_dim != 0 && config.out_dim != out {
        return Err(CliError::Data(format!(
            "config out_dim={} but data implies {out}",
            config.out_dim
        )));
    }
    Ok((feat, out))
}

fn metric_label(task: TaskKind) -> &'static str {
    match task {
        TaskKind::GraphRegression => "mae",
        TaskKind::GraphClassification => "accuracy",
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = read_config(&args.config)?;
    let ds = load_dataset(&args.data, &config)?;
    let (feat, out) = resolve_dims(&config, &ds)?;
    let mut model =
        RealModel::new(&config, feat, out).map_err(|e| CliError::Config(e.to_string()))?;
    let report = train::fit(&mut model, &ds, &config)?;
    model.save(&args.out)?;
    std::fs::write(&args.log, train::metrics_to_csv(&report.log))
        .map_err(|e| CliError::Data(format!("cannot write log: {e}")))?;
    println!(
        "final val {} {} (best epoch {})",
        metric_label(config.task),
        report.best_val,
        report.best_epoch
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = RealModel::load(&args.ckpt)?;
    let config = model.config().clone();
    let ds = load_dataset(&args.data, &config)?;
    let label = metric_label(config.task);
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        if ds.indices(split).is_empty() {
            continue;
        }
        let value = train::evaluate(&model, &ds, split, config.batch_size)
            .map_err(CliError::from)?;
        println!("split={name} metric={label} value={value}");
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let (lo, hi) = parse_range(&args.range)?;
    let report = analyze::enumerate_collisions(args.max_size, lo, hi)
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&args.out, report.to_csv())
        .map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    println!("wrote {} pair rows", report.rows.len());
    Ok(())
}

fn parse_kinds(s: &str) -> Result<Vec<AggregatorKind>, CliError> {
    s.split(',')
        .map(|t| {
            AggregatorKind::from_name(t.trim())
                .ok_or_else(|| CliError::Config(format!("unknown aggregator {t:?}")))
        })
        .collect()
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let graphs = match args.kind.as_str() {
        "pairs" => {
            let (lo, hi) = parse_range(&args.range)?;
            let separate = AggregatorKind::from_name(&args.separate)
                .ok_or_else(|| CliError::Config(format!("unknown aggregator {:?}", args.separate)))?;
            let spec = TopologyPairsSpec {
                max_degree: args.max_degree,
                value_lo: lo,
                value_hi: hi,
                n_per_class: args.count,
                seed: args.seed,
                collide: parse_kinds(&args.collide)?,
                separate,
            };
            data::gen_topology_pairs::<Real>(&spec)
                .map_err(|e| CliError::Data(e.to_string()))?
                .graphs
        }
        "regression" => data::gen_regression::<Real>(args.seed, args.count).graphs,
        other => return Err(CliError::Config(format!("unknown kind {other:?}"))),
    };
    data::write_gtxt(&graphs, &args.out).map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} graphs", graphs.len());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let model = match (&args.ckpt, &args.config) {
        (Some(ckpt), None) => RealModel::load(ckpt)?,
        (None, Some(path)) => {
            let config = read_config(path)?;
            // Inspect needs concrete widths; fall back to hidden_dim
            // and a scalar head when the config leaves them inferred.
            let feat = if config.feat_dim > 0 { config.feat_dim } else { config.hidden_dim };
            let out = if config.out_dim > 0 { config.out_dim } else { 1 };
            RealModel::new(&config, feat, out).map_err(|e| CliError::Config(e.to_string()))?
        }
        _ => return Err(CliError::Config("inspect needs --ckpt or --config".into())),
    };
    print!("{}", model.inspect().to_table());
    Ok(())
}
