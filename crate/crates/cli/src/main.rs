use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use attnsup::attention::{Agg, AttentionConfig, Direction};
use attnsup::metrics::{AttThreshold, F1Mode, MetricThresholds, SummaryJson};
use attnsup::synthworld::{generate, Dataset, DatasetError, Split, WorldConfig};
use attnsup::trainer::{dump_attention, evaluate, train, Model, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "attnsup", version, about = "Toy cross-modal attention training with attention supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-caption world.
    Generate {
        /// World config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write the best-by-validation checkpoint.
    Train(TrainArgs),
    /// Recall@{1,5,10} and rsum on one split.
    EvalRetrieval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Attention precision, recall and F1 on one split.
    EvalAttention {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        t_iou: f64,
        /// `uniform` (1/|K|) or a fixed weight.
        #[arg(long, default_value = "uniform")]
        t_att: AttThreshold,
        #[arg(long, default_value = "paper")]
        f1: F1Mode,
        /// Per-phrase CSV (`phrase_id, ap, ar, af`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write per-pair attention weights and boxes as CSV.
    DumpAttention {
        #[command(flatten)]
        eval: EvalArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss and validation history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    lambda_ccr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda_ccs: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma3: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agg: Option<AggArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Training config JSON; only its attention settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    agg: Option<AggArg>,
    #[arg(long)]
    direction: Option<DirectionArg>,
    /// Also write the JSON summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Logsumexp,
}

impl From<AggArg> for Agg {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Mean => Agg::Mean,
            AggArg::Logsumexp => Agg::LogSumExp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    TextToImage,
    ImageToText,
    Both,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::TextToImage => Direction::TextToImage,
            DirectionArg::ImageToText => Direction::ImageToText,
            DirectionArg::Both => Direction::Both,
        }
    }
}

/// Error category reported in the `kind` field of the error line.
#[derive(Debug, Clone, Copy)]
enum Kind {
    Usage,
    Config,
    Data,
    Model,
    Train,
    Io,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Model => "model",
            Kind::Train => "train",
            Kind::Io => "io",
        })
    }
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

trait OrFail<T> {
    fn or_fail(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::Config(_) => Kind::Config,
        TrainError::Dataset(_) | TrainError::TooFewPairs(_) => Kind::Data,
        TrainError::Io { .. } => Kind::Io,
        _ => Kind::Train,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .or_fail(Kind::Io)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .or_fail(Kind::Config)
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir).map_err(|e| {
        let kind = if matches!(e, DatasetError::Io { .. }) { Kind::Io } else { Kind::Data };
        Failure { kind, error: e.into() }
    })
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Model::load(path)
        .with_context(|| format!("loading model {}", path.display()))
        .or_fail(Kind::Model)
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg: WorldConfig = match config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let d = generate(&cfg).or_fail(Kind::Config)?;
    d.save(out).or_fail(Kind::Io)?;
    print_json(&json!({
        "out": out,
        "train": d.train.len(),
        "val": d.val.len(),
        "test": d.test.len(),
    }));
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let loss = &mut cfg.loss;
    let overrides = [
        (a.lambda_ccr, &mut loss.lambda_ccr),
        (a.lambda_ccs, &mut loss.lambda_ccs),
        (a.gamma1, &mut loss.gamma1),
        (a.gamma2, &mut loss.gamma2),
        (a.gamma3, &mut loss.gamma3),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(agg) = a.agg {
        // One aggregation for both the pair score and the CCR term.
        cfg.loss.agg = agg.into();
        cfg.attention.agg = agg.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.checkpoint = Some(a.out.clone());
    cfg.validate().map_err(|e| Failure {
        kind: Kind::Config,
        error: e.into(),
    })?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = train_config(a)?;
    let data = load_dataset(&a.data)?;
    let outcome = train(&data, &cfg).map_err(|e| Failure {
        kind: train_kind(&e),
        error: e.into(),
    })?;
    outcome.model.save(&a.out).or_fail(Kind::Io)?;
    if let Some(path) = &a.history {
        let text = attnsup::jsonfmt::to_json_line(&outcome.history).or_fail(Kind::Io)?;
        fs::write(path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .or_fail(Kind::Io)?;
    }
    let h = &outcome.history;
    let first = h.steps.first().map(|b| b.total);
    let last = h.steps.last().map(|b| b.total);
    print_json(&json!({
        "checkpoint": a.out,
        "steps": h.steps.len(),
        "first_total": first,
        "last_total": last,
        "best_epoch": h.best_epoch,
        "best_val_rsum": h.evals.iter().find(|e| e.epoch == h.best_epoch).map(|e| e.rsum),
    }));
    Ok(())
}

struct EvalInputs {
    data: Dataset,
    model: Model,
    attention: AttentionConfig,
}

fn eval_inputs(e: &EvalArgs) -> Result<EvalInputs, Failure> {
    let mut attention = match &e.config {
        Some(p) => read_json::<TrainConfig>(p)?.attention,
        None => AttentionConfig::default(),
    };
    if let Some(agg) = e.agg {
        attention.agg = agg.into();
    }
    if let Some(d) = e.direction {
        attention.direction = d.into();
    }
    let data = load_dataset(&e.data)?;
    let model = load_model(&e.model)?;
    if model.vocab_size() != data.meta.vocab_size() || model.region_dim() != data.meta.embed_dim() {
        return Err(Failure {
            kind: Kind::Model,
            error: anyhow::anyhow!(
                "model expects vocab {} and region width {}, dataset has {} and {}",
                model.vocab_size(),
                model.region_dim(),
                data.meta.vocab_size(),
                data.meta.embed_dim()
            ),
        });
    }
    if data.split(e.split).is_empty() {
        return Err(Failure {
            kind: Kind::Data,
            error: anyhow::anyhow!("split {} is empty", e.split.file_name()),
        });
    }
    Ok(EvalInputs { data, model, attention })
}

fn run_eval(e: &EvalArgs, thresholds: &MetricThresholds) -> Result<attnsup::trainer::EvalReport, Failure> {
    let inputs = eval_inputs(e)?;
    let pairs = inputs.data.split(e.split);
    evaluate(&inputs.model, pairs, &inputs.attention, thresholds).map_err(|err| Failure {
        kind: train_kind(&err),
        error: err.into(),
    })
}

fn emit_summary(summary: &SummaryJson, path: Option<&Path>) -> Result<(), Failure> {
    if let Some(p) = path {
        summary.write(p).or_fail(Kind::Io)?;
    }
    print_json(&serde_json::to_value(summary).or_fail(Kind::Io)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train(a) => cmd_train(&a),
        Command::EvalRetrieval { eval } => {
            let report = run_eval(&eval, &MetricThresholds::default())?;
            emit_summary(&SummaryJson::new(None, Some(&report.retrieval)), eval.summary.as_deref())
        }
        Command::EvalAttention {
            eval,
            t_iou,
            t_att,
            f1,
            csv,
        } => {
            if !(t_iou > 0.0 && t_iou <= 1.0) {
                return Err(Failure {
                    kind: Kind::Usage,
                    error: anyhow::anyhow!("--t-iou must lie in (0, 1], got {t_iou}"),
                });
            }
            let report = run_eval(&eval, &MetricThresholds { t_iou, t_att })?;
            if let Some(p) = &csv {
                report.attention.write_csv(p, f1).or_fail(Kind::Io)?;
            }
            let summary = SummaryJson::new(Some(&report.attention), None);
            if let Some(p) = &eval.summary {
                summary.write(p).or_fail(Kind::Io)?;
            }
            let mut value = serde_json::to_value(&summary).or_fail(Kind::Io)?;
            value["f1"] = json!(report.attention.f1(f1));
            print_json(&value);
            Ok(())
        }
        Command::DumpAttention { eval, out } => {
            let inputs = eval_inputs(&eval)?;
            let files = dump_attention(&inputs.model, inputs.data.split(eval.split), &inputs.attention, &out)
                .map_err(|e| Failure {
                    kind: train_kind(&e),
                    error: e.into(),
                })?;
            print_json(&json!({ "out": out, "pairs": files.len() }));
            Ok(())
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// outer message.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out.replace('\n', " ")
}

fn report(kind: Kind, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind.to_string(), "message": message }));
    ExitCode::from(if matches!(kind, Kind::Usage) { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report(Kind::Usage, first.trim_start_matches("error: ").to_string());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f.kind, message(&f.error)),
    }
}
