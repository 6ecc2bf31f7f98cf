//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use marn_core::data_io::vocab::RESERVED;
use marn_core::data_io::{encode_query, QueryTokens, VideoFeatures, Vocabulary};
use marn_core::model::{AttnKernel, ModelConfig, TemporalRep};
use marn_core::nn::Parameters;
use marn_core::proposal::StrideRule;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TINY_WORD_DIM: usize = 6;

/// T=8, two scales, N=4, d_v=16, r=2, every hidden width 8, |V|=12.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        t: 8,
        scales: vec![3, 5],
        n_samples: 4,
        stride_rule: StrideRule::Dense,
        d_v: 16,
        r: 2,
        d_vp: 8,
        d_vc: 8,
        d_a: 8,
        d_q: 8,
        d_w: TINY_WORD_DIM,
        d_dec: 8,
        attn_kernel: AttnKernel::K3x3,
        conv1d_kernel: 3,
        temporal_rep: TemporalRep::Conv3d,
        multilevel_train: true,
        multilevel_infer: true,
        lambda: 0.7,
        epsilon: 0.1,
        max_query_len: 6,
        vocab_size: 12,
    }
}

pub fn random_vocab(size: usize, dim: usize, seed: u64) -> Vocabulary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..size - RESERVED.len()).map(|k| format!("w{k:02}")));
    let mut emb = Array2::<f64>::zeros((size, dim));
    for v in emb.iter_mut().skip(RESERVED.len() * dim) {
        *v = normal.sample(&mut rng);
    }
    Vocabulary::from_parts(tokens, emb).unwrap()
}

pub fn random_video(t: usize, d_v: usize, seed: u64) -> VideoFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    VideoFeatures {
        video_id: format!("v{seed}"),
        data: Array2::from_shape_fn((t, d_v), |_| normal.sample(&mut rng)),
        unit_seconds: 1.0,
    }
}

pub fn random_query(vocab: &Vocabulary, words: usize, max_len: usize, seed: u64) -> QueryTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_words = vocab.len() - RESERVED.len();
    let sentence: Vec<String> = (0..words)
        .map(|_| format!("w{:02}", rng.random_range(0..n_words)))
        .collect();
    encode_query(&sentence.join(" "), vocab, max_len).unwrap()
}

/// Adds uniform noise to every parameter so biases are non-zero too.
pub fn jitter<P: Parameters>(params: &mut P, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub tensors_checked: usize,
}

/// Central finite differences of the total loss against the analytic
/// gradient, over every element of every parameter tensor.
pub fn gradient_check(config: marn_core::model::ModelConfig, seed: u64) -> GradCheck {
    use marn_core::model::Marn;
    const STEP: f64 = 1e-5;
    let mut marn = Marn::new(config.clone(), seed).unwrap();
    jitter(&mut marn.params, 0.1, seed + 1);
    let vocab = random_vocab(config.vocab_size, config.d_w, seed + 2);
    let video = random_video(config.t, config.d_v, seed + 3);
    let query = random_query(&vocab, 3, config.max_query_len, seed + 4);
    let (_, grad) = marn.loss_and_grad(&video, &query).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut worst_tensor = String::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (e, &a) in g.iter().enumerate() {
            let original = marn.params.tensors()[ti].data[e];
            marn.params.tensors_mut()[ti].data[e] = original + STEP;
            let plus = marn.loss(&video, &query).unwrap().total;
            marn.params.tensors_mut()[ti].data[e] = original - STEP;
            let minus = marn.loss(&video, &query).unwrap().total;
            marn.params.tensors_mut()[ti].data[e] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_tensor = format!("{name}[{e}] analytic {a:.3e} numeric {numeric:.3e}");
            }
        }
    }
    GradCheck {
        max_rel_err,
        worst_tensor,
        tensors_checked: analytic.len(),
    }
}

/// Worst deviations found on one random sampling fixture.
pub struct SamplingCheck {
    pub max_row_sum_err: f64,
    /// Every valid row has at most two nonzeros and they are adjacent.
    pub taps_adjacent: bool,
    /// Every invalid cell's weight rows are all zero.
    pub invalid_rows_zero: bool,
    pub max_oracle_err: f64,
}

/// Gather-and-lerp reference for one proposal sample, written from the
/// definition rather than from the sampling map.
pub fn lerp_oracle(
    features: &Array2<f64>,
    start: usize,
    scale: usize,
    n: usize,
    n_samples: usize,
) -> ndarray::Array1<f64> {
    let t = features.nrows();
    let pos = start as f64 + n as f64 * (scale as f64 - 1.0) / (n_samples as f64 - 1.0);
    let below = pos.floor() as usize;
    let frac = pos - below as f64;
    let above = (below + 1).min(t - 1);
    &features.row(below.min(t - 1)) * (1.0 - frac) + &features.row(above) * frac
}

pub fn check_sampling_fixture(
    t: usize,
    scales: &[usize],
    rule: StrideRule,
    n_samples: usize,
    d: usize,
    seed: u64,
) -> SamplingCheck {
    use marn_core::proposal::{apply_sampling, build_sampling_map, enumerate_proposals};
    let grid = enumerate_proposals(t, scales, rule, n_samples).unwrap();
    let map = build_sampling_map(&grid);
    let w = map.dense();
    let mut max_row_sum_err = 0.0f64;
    let mut taps_adjacent = true;
    let mut invalid_rows_zero = true;
    for i in 0..t {
        for j in 0..scales.len() {
            for n in 0..n_samples {
                let row = w.slice(ndarray::s![i, j, n, ..]);
                if !grid.is_valid(i, j) {
                    invalid_rows_zero &= row.iter().all(|&x| x == 0.0);
                    continue;
                }
                max_row_sum_err = max_row_sum_err.max((row.sum() - 1.0).abs());
                let nz: Vec<usize> = (0..t).filter(|&k| row[k] != 0.0).collect();
                taps_adjacent &= nz.len() <= 2 && (nz.len() < 2 || nz[1] == nz[0] + 1);
            }
        }
    }
    let features = random_video(t, d, seed).data;
    let sampled = apply_sampling(&map, features.view()).unwrap();
    let mut max_oracle_err = 0.0f64;
    for (i, j) in grid.valid_cells() {
        for n in 0..n_samples {
            let want = lerp_oracle(&features, i, scales[j], n, n_samples);
            let got = sampled.data.slice(ndarray::s![i, j, n, ..]);
            for (a, b) in want.iter().zip(got.iter()) {
                max_oracle_err = max_oracle_err.max((a - b).abs());
            }
        }
    }
    SamplingCheck {
        max_row_sum_err,
        taps_adjacent,
        invalid_rows_zero,
        max_oracle_err,
    }
}

/// Random strictly increasing scale list within `1..=t`.
pub fn random_scales(t: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = rng.random_range(1..=t.min(6));
    let mut picked = rand::seq::index::sample(rng, t, count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|s| s + 1).collect()
}

/// Worst attention-contract deviations over random small models.
pub struct AttentionCheck {
    pub max_sum_err: f64,
    pub masked_nonzero: usize,
    pub branches_seen: usize,
}

pub fn random_small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let t = rng.random_range(8..=20);
    let rule = if rng.random_bool(0.5) {
        StrideRule::Dense
    } else {
        StrideRule::SparseQuarter
    };
    let kernels = [AttnKernel::K1x1, AttnKernel::K3x3, AttnKernel::K3x3Stacked2];
    let reps = [
        TemporalRep::Conv3d,
        TemporalRep::AvgPool,
        TemporalRep::MaxPool,
        TemporalRep::Recurrent,
    ];
    ModelConfig {
        t,
        scales: random_scales(t, rng),
        stride_rule: rule,
        attn_kernel: kernels[rng.random_range(0..3)],
        temporal_rep: reps[rng.random_range(0..4)],
        conv1d_kernel: if rng.random_bool(0.5) { 1 } else { 3 },
        ..tiny_config()
    }
}

pub fn attention_contract(passes: usize, seed: u64) -> AttentionCheck {
    use marn_core::model::Marn;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = AttentionCheck {
        max_sum_err: 0.0,
        masked_nonzero: 0,
        branches_seen: 0,
    };
    for pass in 0..passes {
        let config = random_small_config(&mut rng);
        let marn = Marn::new(config.clone(), seed + pass as u64).unwrap();
        let vocab = random_vocab(config.vocab_size, config.d_w, pass as u64);
        let video = random_video(config.t, config.d_v, rng.random());
        let query = random_query(&vocab, rng.random_range(1..5), config.max_query_len, rng.random());
        let out = marn.forward(&video, &query).unwrap();
        for attn in std::iter::once(&out.proposal.attention).chain(out.clip.as_ref().map(|c| &c.attention)) {
            check.branches_seen += 1;
            check.max_sum_err = check.max_sum_err.max((attn.valid_sum() - 1.0).abs());
            check.masked_nonzero += attn
                .scores
                .iter()
                .zip(attn.mask.iter())
                .filter(|(&s, &m)| !m && s != 0.0)
                .count();
        }
    }
    check
}

/// IoU by counting shared unit cells of integer intervals.
pub fn counted_iou(a: (i64, i64), b: (i64, i64)) -> f64 {
    let inter = (a.0..a.1).filter(|k| *k >= b.0 && *k < b.1).count() as i64;
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

pub struct MetricFixture {
    pub results: Vec<marn_core::inference::GroundingResult>,
    pub gt: std::collections::HashMap<String, (f64, f64)>,
    pub int_results: Vec<Vec<(i64, i64)>>,
    pub int_gt: Vec<(i64, i64)>,
}

/// Random integer-second rankings (up to 5 entries) and ground truth.
pub fn metric_fixture(n_queries: usize, seed: u64) -> MetricFixture {
    use marn_core::inference::GroundingResult;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interval = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..30i64);
        (s, rng.random_range(s + 1..=32))
    };
    let mut fx = MetricFixture {
        results: Vec::new(),
        gt: Default::default(),
        int_results: Vec::new(),
        int_gt: Vec::new(),
    };
    for q in 0..n_queries {
        let id = format!("q{q}");
        let g = interval(&mut rng);
        let k = rng.random_range(1..=5);
        let ranked: Vec<(i64, i64)> = (0..k).map(|_| interval(&mut rng)).collect();
        fx.results.push(GroundingResult {
            query_id: id.clone(),
            ranked: ranked
                .iter()
                .enumerate()
                .map(|(r, &(s, e))| (s as f64, e as f64, -(r as f64)))
                .collect(),
        });
        fx.gt.insert(id, (g.0 as f64, g.1 as f64));
        fx.int_results.push(ranked);
        fx.int_gt.push(g);
    }
    fx
}

pub fn oracle_recall(fx: &MetricFixture, n: usize, theta: f64) -> f64 {
    let mut hits = 0;
    for (ranked, &g) in fx.int_results.iter().zip(&fx.int_gt) {
        if ranked.iter().take(n).any(|&iv| counted_iou(iv, g) >= theta) {
            hits += 1;
        }
    }
    hits as f64 / fx.int_gt.len() as f64
}

pub fn oracle_miou(fx: &MetricFixture) -> f64 {
    let mut total = 0.0;
    for (ranked, &g) in fx.int_results.iter().zip(&fx.int_gt) {
        total += counted_iou(ranked[0], g);
    }
    total / fx.int_gt.len() as f64
}

/// Metric values that disagree with the counting oracle (exact comparison).
pub fn metric_mismatches(fx: &MetricFixture) -> Vec<String> {
    use marn_core::inference::{mean_iou, recall_at_n};
    let mut bad = Vec::new();
    for n in [1, 2, 5] {
        for theta in [0.0, 0.1, 0.3, 0.5, 0.7, 1.0] {
            let got = recall_at_n(&fx.results, &fx.gt, n, theta).unwrap();
            let want = oracle_recall(fx, n, theta);
            if got != want {
                bad.push(format!("R@{n} IoU={theta}: {got} vs {want}"));
            }
        }
    }
    let got = mean_iou(&fx.results, &fx.gt).unwrap();
    if got != oracle_miou(fx) {
        bad.push(format!("mIoU: {got} vs {}", oracle_miou(fx)));
    }
    bad
}

/// Random attention maps over a random grid; ties are injected on purpose.
pub fn random_attention_pair(
    seed: u64,
) -> (
    marn_core::proposal::ProposalGrid,
    marn_core::model::AttentionMap,
    marn_core::model::AttentionMap,
) {
    use marn_core::model::{AttentionMap, Branch};
    use marn_core::proposal::enumerate_proposals;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(8..=32);
    let scales = random_scales(t, &mut rng);
    let rule = if rng.random_bool(0.5) { StrideRule::Dense } else { StrideRule::SparseQuarter };
    let grid = enumerate_proposals(t, &scales, rule, 4).unwrap();
    let levels = rng.random_range(2..50);
    let mut p = grid.valid().mapv(|v| if v { rng.random_range(0..levels) as f64 } else { 0.0 });
    p /= p.sum().max(1.0);
    let mut c = Array2::from_shape_fn((t, 1), |_| rng.random::<f64>());
    c /= c.sum();
    (
        grid.clone(),
        AttentionMap { branch: Branch::Proposal, scores: p, mask: grid.valid().clone() },
        AttentionMap { branch: Branch::Clip, scores: c, mask: Array2::from_elem((t, 1), true) },
    )
}

/// Score maps (out of `maps`) whose epsilon = 0 or clip-free ranking differs
/// from ranking the proposal attention on its own.
pub fn ensemble_degeneracy_failures(maps: u64) -> usize {
    use marn_core::inference::{ensemble_scores, rank_proposals};
    let mut failures = 0;
    for seed in 0..maps {
        let (grid, p, c) = random_attention_pair(seed);
        let alone = p.scores.clone()
            + grid.valid().mapv(|v| if v { 0.0 } else { f64::NEG_INFINITY });
        let top = grid.valid_count();
        let reference = rank_proposals("q", &alone, &grid, 1.0, top).unwrap();
        let zero = ensemble_scores(&p, Some(&c), 0.0, &grid).unwrap();
        let off = ensemble_scores(&p, None, 0.3, &grid).unwrap();
        for scores in [zero, off] {
            if rank_proposals("q", &scores, &grid, 1.0, top).unwrap() != reference {
                failures += 1;
            }
        }
    }
    failures
}

/// Writes a small synthetic dataset and returns its directory.
pub fn write_small_synthetic(
    dir: &std::path::Path,
    train: usize,
    test: usize,
    seed: u64,
) -> std::path::PathBuf {
    use marn_core::data_io::{generate_synthetic_dataset, write_synthetic_dataset, SplitSpec, SyntheticSpec};
    let spec = SyntheticSpec::new(train + test, 16, 16, 10, seed);
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let splits = [
        SplitSpec { name: "train".into(), count: train },
        SplitSpec { name: "test".into(), count: test },
    ];
    write_synthetic_dataset(&ds, dir, &splits).unwrap();
    dir.to_path_buf()
}

/// Training config matching [`write_small_synthetic`] output.
pub fn small_train_config(checkpoint_dir: &std::path::Path) -> marn_core::train::TrainConfig {
    marn_core::train::TrainConfig {
        model: ModelConfig {
            t: 16,
            scales: vec![2, 3, 4],
            d_v: 16,
            r: 2,
            d_w: 16,
            vocab_size: 0,
            ..tiny_config()
        },
        batch_size: 4,
        epochs: 2,
        seed: 11,
        checkpoint_dir: checkpoint_dir.to_path_buf(),
        ..Default::default()
    }
}
