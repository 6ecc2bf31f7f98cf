//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p marn-core --test acceptance`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    attention_contract, check_sampling_fixture, ensemble_degeneracy_failures, gradient_check,
    metric_fixture, metric_mismatches, random_query, random_scales, random_vocab,
    tiny_config,
};
use marn_core::data_io::{
    generate_synthetic_dataset, load_embedding_table, load_manifest, vocab::corpus_words,
    write_synthetic_dataset, SplitSpec, SyntheticSpec,
};
use marn_core::model::{Branch, GlobalFeature, Marn, ModelConfig};
use marn_core::pipeline::{evaluate_dataset, load_dataset, Dataset};
use marn_core::proposal::{build_sampling_map, StrideRule};
use marn_core::reconstruction::{caption_loss, DecoderParams};
use marn_core::train::{train, TrainConfig};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SAMPLING_GRIDS: u64 = 100;
const SAMPLING_ROW_TOL: f64 = 1e-6;
const SAMPLING_ORACLE_TOL: f64 = 1e-5;
const SAMPLING_BUDGET: Duration = Duration::from_secs(10);
const ATTENTION_PASSES: usize = 50;
const ATTENTION_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const UNIFORM_LOSS_TOL: f64 = 1e-6;
const METRIC_QUERIES: usize = 50;
const ENSEMBLE_MAPS: u64 = 20;
const E2E_MIN_RECALL: f64 = 0.80;
const E2E_MAX_EPOCHS: usize = 15;
const E2E_BUDGET: Duration = Duration::from_secs(600);
const REPRO_TOL: f64 = 1e-6;

struct Outcome {
    passed: bool,
    detail: String,
    /// Measured values compared across the two determinism runs.
    digest: Vec<f64>,
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sampling_correctness(seed: u64) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut row_err, mut oracle_err) = (0.0f64, 0.0f64);
    let (mut adjacent, mut invalid_zero) = (true, true);
    for g in 0..SAMPLING_GRIDS {
        let t = rng.random_range(2..=32);
        let scales = random_scales(t, &mut rng);
        let rule = if rng.random_bool(0.5) { StrideRule::Dense } else { StrideRule::SparseQuarter };
        let n = rng.random_range(2..=6);
        let c = check_sampling_fixture(t, &scales, rule, n, 5, seed * 1000 + g);
        row_err = row_err.max(c.max_row_sum_err);
        oracle_err = oracle_err.max(c.max_oracle_err);
        adjacent &= c.taps_adjacent;
        invalid_zero &= c.invalid_rows_zero;
    }
    let elapsed = start.elapsed();
    Outcome {
        passed: row_err <= SAMPLING_ROW_TOL
            && oracle_err <= SAMPLING_ORACLE_TOL
            && adjacent
            && invalid_zero
            && elapsed < SAMPLING_BUDGET,
        detail: format!(
            "{SAMPLING_GRIDS} grids: row-sum err {row_err:.1e} (tol {SAMPLING_ROW_TOL:.0e}), \
             adjacent taps {adjacent}, invalid rows zero {invalid_zero}, \
             oracle err {oracle_err:.1e} (tol {SAMPLING_ORACLE_TOL:.0e}), {:.2}s (< {}s)",
            elapsed.as_secs_f64(),
            SAMPLING_BUDGET.as_secs()
        ),
        digest: vec![row_err, oracle_err],
    }
}

fn shape_fidelity() -> Outcome {
    let shape = |c: ModelConfig| build_sampling_map(&c.proposal_grid().unwrap()).dense().shape().to_vec();
    let charades = shape(ModelConfig::charades());
    let activitynet = shape(ModelConfig::activitynet());
    Outcome {
        passed: charades == [32, 6, 4, 32] && activitynet == [128, 64, 4, 128],
        detail: format!("charades W {charades:?} (want [32, 6, 4, 32]), activitynet W {activitynet:?} (want [128, 64, 4, 128])"),
        digest: charades.iter().chain(&activitynet).map(|&d| d as f64).collect(),
    }
}

fn attention_contract_holds(seed: u64) -> Outcome {
    let c = attention_contract(ATTENTION_PASSES, seed);
    Outcome {
        passed: c.max_sum_err <= ATTENTION_TOL
            && c.masked_nonzero == 0
            && c.branches_seen == 2 * ATTENTION_PASSES,
        detail: format!(
            "{ATTENTION_PASSES} passes, {} branch maps: sum err {:.1e} (tol {ATTENTION_TOL:.0e}), \
             nonzero masked cells {}",
            c.branches_seen, c.max_sum_err, c.masked_nonzero
        ),
        digest: vec![c.max_sum_err, c.masked_nonzero as f64],
    }
}

fn gradients_match(seed: u64) -> Outcome {
    let start = Instant::now();
    let c = gradient_check(tiny_config(), seed);
    let elapsed = start.elapsed();
    Outcome {
        passed: c.max_rel_err <= GRAD_TOL && elapsed < GRAD_BUDGET,
        detail: format!(
            "{} tensors: max rel err {:.2e} (tol {GRAD_TOL:.0e}) at {}, {:.1}s (< {}s)",
            c.tensors_checked,
            c.max_rel_err,
            c.worst_tensor,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
        digest: vec![c.max_rel_err],
    }
}

fn zero_decoder_is_uniform(seed: u64) -> Outcome {
    let config = tiny_config();
    let vocab = random_vocab(config.vocab_size, config.d_w, seed);
    let expected = (config.vocab_size as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, d_global) in [config.d_vp, config.d_vc, 5].into_iter().enumerate() {
        let params = DecoderParams::zeros(d_global, config.d_dec, config.d_w, config.vocab_size);
        let global = GlobalFeature {
            branch: Branch::Proposal,
            vec: Array1::from_shape_fn(d_global, |_| rng.random_range(-3.0..3.0)),
        };
        let query = random_query(&vocab, 1 + k, config.max_query_len, seed + k as u64);
        let loss = caption_loss(&global, &query, &params).unwrap();
        worst = worst.max((loss.value - expected).abs());
    }
    Outcome {
        passed: worst <= UNIFORM_LOSS_TOL,
        detail: format!("caption loss vs ln|V| = {expected:.6}: max err {worst:.1e} (tol {UNIFORM_LOSS_TOL:.0e})"),
        digest: vec![worst],
    }
}

fn metrics_match_oracle(seed: u64) -> Outcome {
    let fx = metric_fixture(METRIC_QUERIES, seed);
    let bad = metric_mismatches(&fx);
    Outcome {
        passed: bad.is_empty(),
        detail: format!(
            "{METRIC_QUERIES}-query fixture: {} mismatches against the brute-force reference{}",
            bad.len(),
            bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default()
        ),
        digest: vec![bad.len() as f64],
    }
}

fn ensemble_degenerates() -> Outcome {
    let failures = ensemble_degeneracy_failures(ENSEMBLE_MAPS);
    Outcome {
        passed: failures == 0,
        detail: format!(
            "{ENSEMBLE_MAPS} score maps: {failures} rankings differ from proposal-only (epsilon = 0 and clip branch off)"
        ),
        digest: vec![failures as f64],
    }
}

/// Writes the 200/50 synthetic dataset (26 content words plus 4 reserved
/// tokens) used by the end-to-end and ablation runs.
fn write_e2e_synthetic(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec::new(250, 32, 32, 26, 7);
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let splits = [
        SplitSpec { name: "train".into(), count: 200 },
        SplitSpec { name: "test".into(), count: 50 },
    ];
    write_synthetic_dataset(&ds, dir, &splits).unwrap();
    dir.to_path_buf()
}

fn mean_train_loss(marn: &Marn, data: &Dataset) -> f64 {
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| marn.loss(data.video_of(s), &s.query).unwrap().total)
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn end_to_end(data: &Path, work: &Path) -> Outcome {
    let start = Instant::now();
    let mut config = TrainConfig::from_file(repo_root().join("configs/synthetic.toml")).unwrap();
    config.checkpoint_dir = work.to_path_buf();
    let train_m = load_manifest(data.join("train.jsonl")).unwrap();
    let test_m = load_manifest(data.join("test.jsonl")).unwrap();
    let table = load_embedding_table(data.join("embeddings.txt"), Some(&corpus_words(&train_m))).unwrap();
    // no validation split: the test split plays no part in training or model selection
    let outcome = train(&config, &train_m, None, &table).unwrap();
    let train_elapsed = start.elapsed();

    let marn = &outcome.model;
    let cfg = &marn.config;
    let vocab = &outcome.vocabulary;
    let test = load_dataset(&test_m, vocab, cfg.t, cfg.d_v, cfg.max_query_len).unwrap();
    let (report, _) = evaluate_dataset(marn, &test, &[1, 5], &[0.3, 0.5, 0.7]).unwrap();
    let recall = report.recall(1, 0.5).unwrap();

    let mut untrained = Marn::new(cfg.clone(), config.seed).unwrap();
    untrained.params.round_to_f32();
    let (baseline, _) = evaluate_dataset(&untrained, &test, &[1], &[0.5]).unwrap();
    let train_data = load_dataset(&train_m.without_intervals(), vocab, cfg.t, cfg.d_v, cfg.max_query_len).unwrap();
    let initial_loss = mean_train_loss(&untrained, &train_data);
    let final_loss = mean_train_loss(marn, &train_data);
    let reduction = 1.0 - final_loss / initial_loss;

    Outcome {
        passed: vocab.len() == 30
            && config.epochs <= E2E_MAX_EPOCHS
            && recall >= E2E_MIN_RECALL
            && train_elapsed < E2E_BUDGET,
        detail: format!(
            "|V| = {}, {} epochs on 1 thread in {:.1}s (< {}s): test R@1 IoU=0.5 = {recall:.4} \
             (min {E2E_MIN_RECALL:.2}; untrained {:.4}), mIoU {:.4}; \
             train loss {initial_loss:.4} -> {final_loss:.4} ({:.1}% lower)",
            vocab.len(),
            config.epochs,
            train_elapsed.as_secs_f64(),
            E2E_BUDGET.as_secs(),
            baseline.recall(1, 0.5).unwrap(),
            report.miou,
            100.0 * reduction
        ),
        digest: [recall, report.miou, initial_loss, final_loss]
            .into_iter()
            .chain(report.recalls.iter().map(|r| r.value))
            .collect(),
    }
}

fn ablations_launch(data: &Path, work: &Path) -> Outcome {
    let dir = repo_root().join("configs/ablation");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    let train_m = load_manifest(data.join("train.jsonl")).unwrap();
    let test_m = load_manifest(data.join("test.jsonl")).unwrap();
    let mut failed = Vec::new();
    for file in &files {
        let name = file.file_stem().unwrap().to_string_lossy().into_owned();
        let run = || -> marn_core::Result<()> {
            let mut config = TrainConfig::from_file(file)?;
            config.checkpoint_dir = work.join(&name);
            let table = load_embedding_table(data.join("embeddings.txt"), Some(&corpus_words(&train_m)))?;
            let outcome = train(&config, &train_m, Some(&test_m), &table)?;
            if outcome.run_log.epochs.len() != 1 || !outcome.last_checkpoint.is_file() {
                return Err(marn_core::MarnError::Data("no single-epoch checkpoint".into()));
            }
            Ok(())
        };
        if let Err(e) = run() {
            failed.push(format!("{name}: {e}"));
        }
    }
    Outcome {
        passed: files.len() == 10 && failed.is_empty(),
        detail: format!(
            "{} config files, {} trained one epoch{}",
            files.len(),
            files.len() - failed.len(),
            if failed.is_empty() { String::new() } else { format!("; failures: {failed:?}") }
        ),
        digest: vec![],
    }
}

fn run_core(data: &Path, work: &Path) -> Vec<(&'static str, Outcome)> {
    vec![
        ("sampling-map correctness", sampling_correctness(1)),
        ("configuration shape fidelity", shape_fidelity()),
        ("attention contract", attention_contract_holds(2)),
        ("gradient check", gradients_match(3)),
        ("zero-decoder loss", zero_decoder_is_uniform(4)),
        ("metric oracle", metrics_match_oracle(5)),
        ("ensemble degeneracy", ensemble_degenerates()),
        ("end-to-end weak supervision", end_to_end(data, work)),
    ]
}

fn report(index: usize, name: &str, o: &Outcome) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {index:>2}. {name}: {}", o.detail);
}

fn main() {
    // `cargo test -- --list` and filtered runs should not start the suite
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let data = write_e2e_synthetic(&work.path().join("data"));

    println!("acceptance suite");
    let first = run_core(&data, &work.path().join("run_a"));
    let mut all_passed = true;
    for (i, (name, o)) in first.iter().enumerate() {
        report(i + 1, name, o);
        all_passed &= o.passed;
    }

    let second = run_core(&data, &work.path().join("run_b"));
    let mut worst = 0.0f64;
    let mut differing = Vec::new();
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        let same_len = a.digest.len() == b.digest.len();
        let diff = a
            .digest
            .iter()
            .zip(&b.digest)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        if !same_len || diff > REPRO_TOL || a.passed != b.passed {
            differing.push(*name);
        }
    }
    let repro = Outcome {
        passed: differing.is_empty(),
        detail: format!(
            "second run of criteria 1-8: max metric difference {worst:.1e} (tol {REPRO_TOL:.0e}), differing {differing:?}"
        ),
        digest: vec![],
    };
    report(9, "determinism", &repro);
    all_passed &= repro.passed;

    let ablation = ablations_launch(&data, &work.path().join("ablation"));
    report(10, "ablation expressibility", &ablation);
    all_passed &= ablation.passed;

    println!("acceptance: {}", if all_passed { "all criteria passed" } else { "FAILED" });
    if !all_passed {
        std::process::exit(1);
    }
}
