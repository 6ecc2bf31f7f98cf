//! `marn`: train, evaluate and query temporal grounding models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marn_core::checkpoint::load_checkpoint;
use marn_core::data_io::{
    generate_synthetic_dataset, load_embedding_table, load_manifest, vocab::corpus_words,
    write_synthetic_dataset, SplitSpec, SyntheticSpec,
};
use marn_core::inference::{write_predictions, DEFAULT_IOU_THRESHOLDS, DEFAULT_RECALL_N};
use marn_core::pipeline::{evaluate_dataset_with, load_dataset, Grounder};
use marn_core::train::{train, TrainConfig};
use marn_core::{MarnError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "marn", version, about = "Weakly-supervised temporal grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and sentence manifests.
    Train(TrainArgs),
    /// Rank proposals for every entry of a manifest and report metrics.
    Evaluate(EvaluateArgs),
    /// Ground one sentence in one feature file.
    Ground(GroundArgs),
    /// Write the attention maps for one sentence as CSV.
    ExportAttention(ExportArgs),
    /// Generate a synthetic dataset with planted segments.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest used to pick the best checkpoint.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Word embedding table ("word v1 ... vd" per line).
    #[arg(long)]
    embeddings: PathBuf,
    /// Overrides `checkpoint_dir` from the config.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RECALL_N)]
    recall_n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS)]
    iou: Vec<f64>,
    /// Also write the rankings as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Suppress overlapping proposals (IoU >= 0.5) before truncation.
    #[arg(long)]
    nms: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sentence: String,
    #[arg(long, default_value_t = 5)]
    top_n: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sentence: String,
    /// Proposal map CSV; the clip vector goes next to it as `<stem>.clip.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long = "T", default_value_t = 32)]
    t: usize,
    #[arg(long, default_value_t = 32)]
    d_v: usize,
    /// Content words; the vocabulary adds four reserved tokens.
    #[arg(long, default_value_t = 26)]
    vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::from_file(&args.config)?;
    config.apply_env_overrides()?;
    if let Some(dir) = args.checkpoint_dir {
        config.checkpoint_dir = dir;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let train_manifest = load_manifest(&args.train)?;
    let val_manifest = args.val.as_ref().map(load_manifest).transpose()?;
    let keep = corpus_words(&train_manifest);
    let table = load_embedding_table(&args.embeddings, Some(&keep))?;
    let outcome = train(&config, &train_manifest, val_manifest.as_ref(), &table)?;
    let last = outcome.run_log.epochs.last();
    print_json(&json!({
        "best_checkpoint": outcome.best_checkpoint,
        "last_checkpoint": outcome.last_checkpoint,
        "best_epoch": outcome.best_epoch,
        "steps": outcome.run_log.steps.len(),
        "final_mean_loss": last.map(|e| e.mean_total),
        "validation": last.and_then(|e| e.validation.as_ref()).map(|r| r.to_json()),
    }));
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let grounder = Grounder::from_checkpoint(load_checkpoint(&args.checkpoint)?)?;
    let manifest = load_manifest(&args.manifest)?;
    manifest.require_intervals()?;
    let cfg = &grounder.marn.config;
    let data = load_dataset(&manifest, &grounder.vocabulary, cfg.t, cfg.d_v, cfg.max_query_len)?;
    let nms = args.nms.then_some(0.5);
    let (report, results) =
        evaluate_dataset_with(&grounder.marn, &data, &args.recall_n, &args.iou, nms)?;
    if let Some(p) = &args.predictions {
        write_predictions(p, &results)?;
    }
    let text = serde_json::to_string_pretty(&report.to_json()).expect("json");
    match &args.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| MarnError::io(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_ground(args: GroundArgs) -> Result<()> {
    let grounder = Grounder::from_checkpoint(load_checkpoint(&args.checkpoint)?)?;
    let video = grounder.load_video(&args.features)?;
    let id = video.video_id.clone();
    let result = grounder.ground(&id, &video, &args.sentence, args.top_n)?;
    println!("{}", serde_json::to_string(&result).expect("json"));
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let grounder = Grounder::from_checkpoint(load_checkpoint(&args.checkpoint)?)?;
    let video = grounder.load_video(&args.features)?;
    let written = grounder.export_attention(&video, &args.sentence, &args.out)?;
    print_json(&json!({ "written": written }));
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let total = args.train + args.val + args.test;
    let spec = SyntheticSpec {
        embedding_dim: args.embedding_dim,
        ..SyntheticSpec::new(total, args.t, args.d_v, args.vocab_size, args.seed)
    };
    let dataset = generate_synthetic_dataset(&spec)?;
    let splits: Vec<SplitSpec> = [("train", args.train), ("val", args.val), ("test", args.test)]
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(name, count)| SplitSpec {
            name: name.into(),
            count,
        })
        .collect();
    let written = write_synthetic_dataset(&dataset, &args.out, &splits)?;
    print_json(&json!({ "videos": total, "files": written.len(), "out": args.out }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ground(a) => run_ground(a),
        Command::ExportAttention(a) => run_export(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
