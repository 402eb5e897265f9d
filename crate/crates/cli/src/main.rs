//! `scbm` command-line entry point.
//!
//! Results go to stdout as one JSON object. Failures print one JSON line
//! `{"error":{"kind":..,"message":..}}` on stderr and exit nonzero.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use scbm::experiment::{
    correlation, correlation_csv, csv_header, curve_csv, evaluate, instance_row, run_experiment,
    ExperimentConfig, Preset,
};
use scbm::format::write_atomic;
use scbm::intervention::{run_intervention_curve, PolicyKind, StrategyConfig, StrategyKind};
use scbm::model::{train, Checkpoint, PredictConfig, ProbMode, TrainConfig, Variant};
use scbm::synth::{generate_split, Dataset, Split, SynthConfig};
use scbm::{Error, Result};
use scbm_serve::{restore_snapshot, AppState, ServeConfig};

/// Exit code for runtime failures; argument errors use 2.
const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "scbm", version, about = "Stochastic concept bottleneck models")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a split synthetic dataset.
    GenerateData(GenerateArgs),
    /// Train one model variant on a dataset.
    Train(TrainArgs),
    /// Report metrics of a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Simulate an intervention curve on the test split.
    Intervene(InterveneArgs),
    /// Write the concept-logit correlation matrix as CSV.
    ExportCorr(ExportCorrArgs),
    /// Serve the session API for a checkpoint.
    Serve(ServeArgs),
    /// Run a configured multi-seed experiment.
    RunExperiment(RunExperimentArgs),
}

/// Parses a kebab-case enum value through its serde names.
fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = kebab::<Preset>, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = kebab::<Variant>)]
    variant: Variant,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = kebab::<scbm::model::GlobalInit>)]
    global_init: Option<scbm::model::GlobalInit>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = PredictConfig::default().mc_samples)]
    mc_samples: usize,
    #[arg(long, value_parser = kebab::<ProbMode>, default_value = "mc-mean")]
    prob_mode: ProbMode,
}

impl PredictArgs {
    fn config(&self) -> PredictConfig {
        PredictConfig {
            mc_samples: self.mc_samples,
            prob_mode: self.prob_mode,
        }
    }
}

#[derive(Args)]
struct StrategyArgs {
    #[arg(long, value_parser = kebab::<StrategyKind>, default_value = "confidence-region")]
    strategy: StrategyKind,
    /// Confidence level of the region.
    #[arg(long, default_value_t = StrategyConfig::default().level)]
    level: f64,
}

impl StrategyArgs {
    fn config(&self) -> StrategyConfig {
        StrategyConfig {
            kind: self.strategy,
            level: self.level,
            ..StrategyConfig::default()
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = kebab::<Split>, default_value = "test")]
    split: Split,
    #[command(flatten)]
    predict: PredictArgs,
    /// Also write per-instance probabilities as CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct InterveneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = kebab::<PolicyKind>, default_value = "uncertainty")]
    policy: PolicyKind,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Largest number of intervened concepts; defaults to all.
    #[arg(long)]
    max_k: Option<usize>,
    #[command(flatten)]
    predict: PredictArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCorrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset holding the instance for amortized checkpoints.
    #[arg(long, requires = "row")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    row: Option<usize>,
    /// Comma-separated covariates for amortized checkpoints.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "data")]
    instance: Option<Vec<f64>>,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose test split backs `test_index` sessions.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, value_parser = kebab::<PolicyKind>, default_value = "uncertainty")]
    policy: PolicyKind,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[command(flatten)]
    predict: PredictArgs,
    /// Sessions are restored from this file at startup and written back on shutdown.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct RunExperimentArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            report("usage", message.trim());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if cli.verbose {
        tracing_subscriber::fmt()
            .with_writer(std::io::stderr)
            .with_max_level(tracing::Level::INFO)
            .init();
    } else {
        tracing_subscriber::fmt()
            .with_writer(std::io::stderr)
            .with_max_level(tracing::Level::WARN)
            .init();
    }
    match run(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(if matches!(e, Error::Usage(_)) { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Intervene(a) => intervene_cmd(a),
        Command::ExportCorr(a) => export_corr(a),
        Command::Serve(a) => serve_cmd(a),
        Command::RunExperiment(a) => run_experiment_cmd(a),
    }
}

fn generate_data(a: GenerateArgs) -> Result<Value> {
    let mut cfg = match a.preset {
        Preset::Full => SynthConfig::full(a.seed),
        Preset::Desk => SynthConfig::desk(a.seed),
    };
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.p = a.p.unwrap_or(cfg.p);
    cfg.c = a.c.unwrap_or(cfg.c);
    cfg.rank = a.rank.unwrap_or(cfg.rank);
    let ds = generate_split(&cfg)?;
    ds.save(&a.out)?;
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| ds.indices(s).map(|i| i.len()))
        .collect::<Result<_>>()?;
    Ok(json!({
        "path": a.out,
        "rows": ds.len(),
        "features": ds.num_features(),
        "concepts": ds.num_concepts(),
        "split": { "train": sizes[0], "val": sizes[1], "test": sizes[2] },
    }))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid train config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(epochs, lr, batch_size, mc_samples, lambda1, hidden, depth, seed, global_init);
    if a.lambda2.is_some() {
        cfg.lambda2 = a.lambda2;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let cfg = train_config(&a)?;
    let ds = Dataset::load(&a.data)?;
    let ckpt = train(&ds, a.variant, &cfg)?;
    ckpt.save(&a.out)?;
    let best = ckpt.history.iter().find(|r| r.epoch == ckpt.best_epoch);
    Ok(json!({
        "checkpoint": a.out,
        "checkpoint_hash": ckpt.hash(),
        "variant": a.variant,
        "epochs": ckpt.history.len(),
        "best_epoch": ckpt.best_epoch,
        "val_target_accuracy": best.map(|r| r.val_target_accuracy),
    }))
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(ckpt)?;
    let ds = Dataset::load(data)?;
    if ds.num_features() != ckpt.model.features() || ds.num_concepts() != ckpt.model.concepts {
        return Err(Error::Config(format!(
            "dataset has {} features and {} concepts, checkpoint expects {} and {}",
            ds.num_features(),
            ds.num_concepts(),
            ckpt.model.features(),
            ckpt.model.concepts
        )));
    }
    Ok((ckpt, ds))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<Value> {
    let (ckpt, ds) = load_pair(&a.checkpoint, &a.data)?;
    let batch = ds.part(a.split)?;
    let pcfg = a.predict.config();
    let (metrics, preds) = evaluate(&ckpt, &batch, &pcfg, a.predict.seed)?;
    if let Some(path) = &a.predictions {
        let c = ckpt.model.concepts;
        let mut s = csv_header(&ckpt.hash(), &a.predict.seed.to_string());
        let cols: Vec<String> = (0..c)
            .map(|i| format!("p_{i}"))
            .chain((0..preds[0].target_probs.len()).map(|k| format!("y_{k}")))
            .collect();
        s.push_str(&format!("row,{}\n", cols.join(",")));
        for (row, p) in batch.rows.iter().zip(&preds) {
            let vals: Vec<String> = p
                .concept_probs
                .iter()
                .chain(&p.target_probs)
                .map(|v| v.to_string())
                .collect();
            s.push_str(&format!("{row},{}\n", vals.join(",")));
        }
        write_atomic(path, s.as_bytes())?;
    }
    Ok(json!({
        "checkpoint_hash": ckpt.hash(),
        "split": a.split,
        "rows": batch.len(),
        "seed": a.predict.seed,
        "metrics": metrics,
    }))
}

fn intervene_cmd(a: InterveneArgs) -> Result<Value> {
    let (ckpt, ds) = load_pair(&a.checkpoint, &a.data)?;
    let batch = ds.part(Split::Test)?;
    let strategy = a.strategy.config();
    let max_k = a.max_k.unwrap_or(ckpt.model.concepts);
    let curve = run_intervention_curve(
        &ckpt,
        &batch,
        a.policy,
        &strategy,
        &a.predict.config(),
        max_k,
        a.predict.seed,
    )?;
    if let Some(path) = &a.out {
        let header = csv_header(&ckpt.hash(), &a.predict.seed.to_string());
        write_atomic(path, curve_csv(&header, &curve).as_bytes())?;
    }
    Ok(json!({
        "checkpoint_hash": ckpt.hash(),
        "policy": a.policy,
        "strategy": strategy.kind,
        "clipped": curve.clipped,
        "unconverged": curve.unconverged,
        "points": curve.points.iter().map(|p| json!({
            "k": p.k,
            "concept_accuracy": p.concept_accuracy,
            "target_accuracy": p.target_accuracy,
        })).collect::<Vec<_>>(),
    }))
}

fn export_corr(a: ExportCorrArgs) -> Result<Value> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let instance = match (&a.data, a.row, a.instance) {
        (Some(path), Some(row), _) => Some(instance_row(&Dataset::load(path)?, row)?),
        (_, _, Some(x)) => Some(x),
        _ => None,
    };
    let corr = correlation(&ckpt, instance.as_deref())?;
    let csv = correlation_csv(&csv_header(&ckpt.hash(), "-"), &corr);
    match &a.out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            Ok(json!({ "path": path, "concepts": corr.nrows(), "checkpoint_hash": ckpt.hash() }))
        }
        None => {
            print!("{csv}");
            Ok(json!({ "concepts": corr.nrows(), "checkpoint_hash": ckpt.hash() }))
        }
    }
}

fn serve_cmd(a: ServeArgs) -> Result<Value> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = a.data.as_deref().map(Dataset::load).transpose()?;
    let cfg = ServeConfig {
        seed: a.predict.seed,
        predict: a.predict.config(),
        strategy: a.strategy.config(),
        policy: a.policy,
    };
    let state = Arc::new(AppState::new(ckpt, ds.as_ref(), cfg)?);
    if let Some(path) = &a.snapshot {
        let n = restore_snapshot(&state, path)?;
        tracing::info!(sessions = n, "restored sessions");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        scbm_serve::serve(listener, state, a.snapshot.as_deref(), shutdown).await
    })?;
    Ok(json!({ "status": "stopped" }))
}

fn run_experiment_cmd(a: RunExperimentArgs) -> Result<Value> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let summary = run_experiment(&cfg)?;
    let failed: Vec<Value> = summary
        .manifest
        .runs
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| json!({ "seed": r.seed, "variant": r.variant, "stage": r.status, "error": r.error }))
        .collect();
    Ok(json!({
        "dir": summary.dir,
        "config_hash": summary.manifest.config_hash,
        "runs": summary.manifest.runs.len(),
        "failed": failed,
    }))
}
