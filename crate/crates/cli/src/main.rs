use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use embtune::data::{load_manifest, read_feature_file_any, synth_generate, Manifest, Split, SynthSpec};
use embtune::gradcheck::run_suite;
use embtune::losses::{LossMode, DEFAULT_BETA, DEFAULT_LAMBDA};
use embtune::metrics::{cluster_report, pca_project, tsne_project, LabeledEmbeddingSet, TsneOptions};
use embtune::model::{
    load_checkpoint, save_checkpoint, AdapterShape, Checkpoint, EncoderConfig, EncoderParams, Stage, TrainingMeta,
    DEFAULT_ADAPTER_HIDDEN, DEFAULT_BOTTLENECK_DIM, DEFAULT_HIDDEN_DIM,
};
use embtune::training::{
    embed_split, evaluate, train_end2end_baseline, train_stage1, train_stage2, RunLog, TrainConfig, DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE,
};
use embtune::{Error, Matrix};

/// Two-stage encoder finetuning with triplet / Barlow Twins objectives.
#[derive(Parser)]
#[command(name = "embtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Stage 1: finetune an encoder with a metric-learning loss.
    TrainEncoder(TrainEncoderArgs),
    /// Stage 2: train an adapter on top of a frozen encoder.
    TrainAdapter(TrainAdapterArgs),
    /// Baseline: train encoder and adapter jointly with cross-entropy.
    TrainE2e(TrainE2eArgs),
    /// Accuracy (and age MAE when midpoints are defined) on one split.
    Evaluate(EvalArgs),
    /// Write the embeddings of one split as CSV (id,label,e0,...).
    Embed(OutArgs),
    /// Cluster geometry (invariant distance, Davies-Bouldin) of one split.
    Report(ReportArgs),
    /// 2-D projection of one split's embeddings as CSV (id,label,x,y).
    Project(ProjectArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck {
        /// Seed for the random check points.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (manifest.jsonl and feats/ are written here).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    frames_min: usize,
    #[arg(long, default_value_t = 24)]
    frames_max: usize,
    /// Minimum distance between class means.
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    /// Per-frame noise standard deviation.
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskPreset {
    Ser,
    Gender,
    Age,
    Sid,
}

impl TaskPreset {
    fn margin(self) -> f64 {
        match self {
            TaskPreset::Age => 1.2,
            TaskPreset::Ser | TaskPreset::Gender | TaskPreset::Sid => 1.0,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pca,
    Tsne,
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite value >= 0, got {s}"))
    }
}

fn batch_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        Ok(v) => Err(format!("must be at least 2, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct OptimArgs {
    /// Adam learning rate.
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE, value_parser = non_negative)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE, value_parser = batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-epoch log as JSON lines.
    #[arg(long)]
    run_log: Option<PathBuf>,
}

#[derive(Args)]
struct EncoderShapeArgs {
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value_t = DEFAULT_HIDDEN_DIM.to_string())]
    hidden_dims: String,
    #[arg(long, default_value_t = DEFAULT_BOTTLENECK_DIM)]
    bottleneck_dim: usize,
}

#[derive(Args)]
struct TrainEncoderArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LossKind::Combined)]
    loss: LossKind,
    /// Triplet margin [default: 1, or the task preset's margin].
    #[arg(long, value_parser = non_negative)]
    margin: Option<f64>,
    /// Task preset; sets the margin (1.2 for age, 1 otherwise).
    #[arg(long, value_enum)]
    task_preset: Option<TaskPreset>,
    /// Off-diagonal weight of the Barlow Twins term.
    #[arg(long, default_value_t = DEFAULT_LAMBDA, value_parser = non_negative)]
    lambda: f64,
    /// Weight of the Barlow Twins term in combined mode.
    #[arg(long, default_value_t = DEFAULT_BETA, value_parser = non_negative)]
    beta: f64,
    /// Mean-centre embeddings before the cross-correlation.
    #[arg(long)]
    center: bool,
    #[command(flatten)]
    shape: EncoderShapeArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Contrastive,
    Noncontrastive,
    Combined,
}

impl From<LossKind> for LossMode {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Contrastive => LossMode::Contrastive,
            LossKind::Noncontrastive => LossMode::Noncontrastive,
            LossKind::Combined => LossMode::Combined,
        }
    }
}

#[derive(Args)]
struct TrainAdapterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Stage-1 checkpoint holding the encoder to freeze.
    #[arg(long)]
    encoder_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ADAPTER_HIDDEN)]
    adapter_hidden: usize,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct TrainE2eArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ADAPTER_HIDDEN)]
    adapter_hidden: usize,
    #[command(flatten)]
    shape: EncoderShapeArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: SplitArgs,
}

#[derive(Args)]
struct OutArgs {
    #[command(flatten)]
    input: SplitArgs,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    input: SplitArgs,
    /// Also write per-class rows (class,label,invariant_distance,c0,...) as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    input: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Pca)]
    method: Method,
    /// t-SNE perplexity.
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// t-SNE iterations.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Seed for the projection's initialisation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

type CliResult<T = ()> = Result<T, Failure>;

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn parse_widths(s: &str) -> CliResult<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(usage(format!("--hidden-dims: invalid width '{w}'"))),
        })
        .collect()
}

/// Frame dimension declared by the manifest, or read from its first feature file.
fn feature_dim(manifest: &Manifest) -> CliResult<usize> {
    if let Some(d) = manifest.dim {
        return Ok(d);
    }
    let first = manifest
        .samples
        .first()
        .ok_or_else(|| runtime("manifest has no samples"))?;
    Ok(read_feature_file_any::<f64>(manifest.feature_path(first))?.dim())
}

fn encoder_config(manifest: &Manifest, shape: &EncoderShapeArgs, seed: u64) -> CliResult<EncoderConfig> {
    let config = EncoderConfig {
        input_dim: feature_dim(manifest)?,
        hidden_dims: parse_widths(&shape.hidden_dims)?,
        bottleneck_dim: shape.bottleneck_dim,
        seed,
    };
    config
        .validate()
        .map_err(|e| usage(format!("--bottleneck-dim/--hidden-dims: {e}")))?;
    Ok(config)
}

fn train_config(optim: &OptimArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: optim.lr,
        batch_size: optim.batch_size,
        epochs: optim.epochs,
        seed: optim.seed,
        ..Default::default()
    }
}

fn adapter_shape(input_dim: usize, hidden: usize, manifest: &Manifest) -> CliResult<AdapterShape> {
    let shape = AdapterShape {
        input_dim,
        hidden_dim: hidden,
        num_classes: manifest.num_classes(),
    };
    shape.validate().map_err(|e| usage(format!("--adapter-hidden: {e}")))?;
    Ok(shape)
}

fn finish_run(mut log: RunLog, ckpt: &Checkpoint<f64>, out: &Path, run_log: Option<&Path>) -> CliResult<RunLog> {
    save_checkpoint(ckpt, out)?;
    log.checkpoint = Some(out.to_path_buf());
    if let Some(path) = run_log {
        std::fs::write(path, log.to_jsonl()).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(log)
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serializes")
    );
}

fn final_summary(log: &RunLog) -> serde_json::Value {
    let last = log.records.last();
    json!({
        "checkpoint": log.checkpoint,
        "epochs": log.records.len(),
        "first_loss": log.first_loss(),
        "final_loss": log.last_loss(),
        "final_dev_accuracy": last.and_then(|r| r.dev_metric),
    })
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let spec = SynthSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        dim: a.dim,
        frames_min: a.frames_min,
        frames_max: a.frames_max,
        separation: a.separation,
        noise: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    let manifest = synth_generate(&spec, &a.out_dir)?;
    print_json(&json!({
        "manifest": a.out_dir.join("manifest.jsonl"),
        "samples": manifest.samples.len(),
        "classes": manifest.num_classes(),
    }));
    Ok(())
}

fn cmd_train_encoder(a: &TrainEncoderArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let margin = a.margin.or(a.task_preset.map(TaskPreset::margin)).unwrap_or(1.0);
    let cfg = TrainConfig {
        loss_mode: a.loss.into(),
        margin,
        lambda: a.lambda,
        beta: a.beta,
        center: a.center,
        ..train_config(&a.optim)
    };
    cfg.validate()?;
    let enc_cfg = encoder_config(&manifest, &a.shape, a.optim.seed)?;
    let (encoder, log) = train_stage1::<f64>(&manifest, &enc_cfg, &cfg)?;
    let ckpt = Checkpoint {
        encoder_config: enc_cfg,
        encoder,
        adapter: None,
        meta: TrainingMeta {
            stage: Stage::Encoder,
            loss_mode: Some(cfg.loss_mode),
            epoch: cfg.epochs,
            seed: cfg.seed,
        },
    };
    let log = finish_run(log, &ckpt, &a.out, a.optim.run_log.as_deref())?;
    let mut summary = final_summary(&log);
    summary["config"] = serde_json::to_value(&cfg).expect("config serializes");
    print_json(&summary);
    Ok(())
}

fn cmd_train_adapter(a: &TrainAdapterArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = train_config(&a.optim);
    cfg.validate()?;
    let base: Checkpoint<f64> = load_checkpoint(&a.encoder_checkpoint)?;
    let shape = adapter_shape(base.encoder_config.bottleneck_dim, a.adapter_hidden, &manifest)?;
    let (adapter, log) = train_stage2(&manifest, &base.encoder, &shape, &cfg)?;
    let ckpt = Checkpoint {
        adapter: Some(adapter),
        meta: TrainingMeta {
            stage: Stage::Adapter,
            epoch: cfg.epochs,
            seed: cfg.seed,
            ..base.meta.clone()
        },
        ..base
    };
    let log = finish_run(log, &ckpt, &a.out, a.optim.run_log.as_deref())?;
    print_json(&final_summary(&log));
    Ok(())
}

fn cmd_train_e2e(a: &TrainE2eArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = train_config(&a.optim);
    cfg.validate()?;
    let enc_cfg = encoder_config(&manifest, &a.shape, a.optim.seed)?;
    let shape = adapter_shape(enc_cfg.bottleneck_dim, a.adapter_hidden, &manifest)?;
    let (encoder, adapter, log) = train_end2end_baseline::<f64>(&manifest, &enc_cfg, &shape, &cfg)?;
    let ckpt = Checkpoint {
        encoder_config: enc_cfg,
        encoder,
        adapter: Some(adapter),
        meta: TrainingMeta {
            stage: Stage::EndToEnd,
            loss_mode: None,
            epoch: cfg.epochs,
            seed: cfg.seed,
        },
    };
    let log = finish_run(log, &ckpt, &a.out, a.optim.run_log.as_deref())?;
    print_json(&final_summary(&log));
    Ok(())
}

fn load_inputs(a: &SplitArgs) -> CliResult<(Manifest, Checkpoint<f64>)> {
    Ok((load_manifest(&a.manifest)?, load_checkpoint(&a.checkpoint)?))
}

fn cmd_evaluate(a: &EvalArgs) -> CliResult {
    let (manifest, ckpt) = load_inputs(&a.input)?;
    let report = evaluate(&manifest, a.input.split, &ckpt.encoder, ckpt.adapter.as_ref())?;
    print_json(&serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

struct Embedded {
    manifest: Manifest,
    ids: Vec<String>,
    labels: Vec<usize>,
    embeddings: Matrix<f64>,
}

fn embeddings(a: &SplitArgs) -> CliResult<Embedded> {
    let (manifest, ckpt) = load_inputs(a)?;
    let enc: &EncoderParams<f64> = &ckpt.encoder;
    let (pooled, embeddings) = embed_split(&manifest, a.split, enc)?;
    Ok(Embedded {
        manifest,
        ids: pooled.ids,
        labels: pooled.labels,
        embeddings,
    })
}

/// Writes `id,label,<columns>` rows for every embedded sample.
fn write_rows(path: &Path, columns: &[String], ids: &[String], labels: &[String], values: &Matrix<f64>) -> CliResult {
    let csv_err = |e: csv::Error| runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend_from_slice(columns);
    w.write_record(&header).map_err(csv_err)?;
    for ((id, label), row) in ids.iter().zip(labels).zip(values.iter_rows()) {
        let mut rec = vec![id.clone(), label.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn label_names(manifest: &Manifest, labels: &[usize]) -> Vec<String> {
    let names = manifest.class_names();
    labels.iter().map(|&c| names[c].clone()).collect()
}

fn cmd_embed(a: &OutArgs) -> CliResult {
    let Embedded {
        manifest,
        ids,
        labels,
        embeddings: emb,
    } = embeddings(&a.input)?;
    let columns: Vec<String> = (0..emb.cols()).map(|i| format!("e{i}")).collect();
    write_rows(&a.out, &columns, &ids, &label_names(&manifest, &labels), &emb)?;
    print_json(&json!({ "out": a.out, "samples": ids.len(), "dim": emb.cols() }));
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult {
    let Embedded {
        manifest,
        labels,
        embeddings: emb,
        ..
    } = embeddings(&a.input)?;
    let set = LabeledEmbeddingSet::new(emb, labels, manifest.num_classes())?;
    let report = cluster_report(&set)?;
    if let Some(path) = &a.out {
        let csv_err = |e: csv::Error| runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let dim = report.centroids.first().map_or(0, Vec::len);
        let mut header = vec![
            "class".to_string(),
            "label".to_string(),
            "invariant_distance".to_string(),
        ];
        header.extend((0..dim).map(|i| format!("c{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (c, name) in manifest.class_names().iter().enumerate() {
            let mut rec = vec![c.to_string(), name.clone(), report.invariant_distance[c].to_string()];
            rec.extend(report.centroids[c].iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    print_json(&json!({
        "split": a.input.split,
        "mean_invariant_distance": report.mean_invariant_distance,
        "davies_bouldin": report.davies_bouldin,
        "invariant_distance": report.invariant_distance,
    }));
    Ok(())
}

fn cmd_project(a: &ProjectArgs) -> CliResult {
    let Embedded {
        manifest,
        ids,
        labels,
        embeddings: emb,
    } = embeddings(&a.input)?;
    let coords = match a.method {
        Method::Pca => pca_project(&emb)?,
        Method::Tsne => {
            let opts = TsneOptions {
                perplexity: a.perplexity,
                iterations: a.iterations,
                seed: a.seed,
                ..Default::default()
            };
            tsne_project(&emb, &opts).map_err(|e| match e {
                Error::Config(msg) => usage(format!("--perplexity: {msg}")),
                other => other.into(),
            })?
        }
    };
    let columns = ["x".to_string(), "y".to_string()];
    write_rows(&a.out, &columns, &ids, &label_names(&manifest, &labels), &coords)?;
    print_json(&json!({ "out": a.out, "samples": ids.len() }));
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CliResult {
    let report = run_suite(seed)?;
    print_json(&serde_json::to_value(&report).expect("report serializes"));
    if report.passed() {
        Ok(())
    } else {
        Err(runtime(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            report.max_relative_error, report.tolerance
        )))
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainEncoder(a) => cmd_train_encoder(a),
        Command::TrainAdapter(a) => cmd_train_adapter(a),
        Command::TrainE2e(a) => cmd_train_e2e(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Report(a) => cmd_report(a),
        Command::Project(a) => cmd_project(a),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
