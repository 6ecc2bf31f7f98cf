//! The grounding network: per-branch proposal features, query-conditioned
//! attention over the proposal map, and attention-pooled global features.
//!
//! Two branches share one query encoder and one reconstruction decoder:
//!
//! * the proposal branch scores the `T x S` proposal map;
//! * the clip branch scores single units (`S = 1`) and is only built when
//!   `multilevel_train` is set.
//!
//! Each branch runs `conv1d -> ReLU -> sampling -> temporal summary`, fuses
//! the result with the tiled query vector, and turns a small conv stack into
//! logits that are softmax-normalised over valid cells only.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{QueryTokens, VideoFeatures};
use crate::error::{MarnError, Result};
use crate::nn::{
    masked_softmax, relu, relu_backward, softmax_backward, Conv2d, Gru, GruCache, Linear,
    LstmCell, LstmStepCache, ParamMut, ParamRef, Parameters,
};
use crate::proposal::{
    activitynet_scales, build_sampling_map, enumerate_proposals, ProposalGrid,
    SampledProposalTensor, SamplingMap, StrideRule, CHARADES_SCALES,
};
use crate::reconstruction::{
    caption_loss_backward, caption_loss_cached, total_loss, CaptionLoss, DecoderParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Proposal,
    Clip,
}

/// Receptive field of the second attention convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnKernel {
    #[serde(rename = "1x1")]
    K1x1,
    #[serde(rename = "3x3")]
    K3x3,
    #[serde(rename = "3x3_stacked2")]
    K3x3Stacked2,
}

/// How the `N` samples of a proposal are summarised into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalRep {
    Conv3d,
    AvgPool,
    MaxPool,
    Recurrent,
}

/// Missing keys fall back to the Charades preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub scales: Vec<usize>,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub stride_rule: StrideRule,
    pub d_v: usize,
    pub r: usize,
    pub d_vp: usize,
    pub d_vc: usize,
    pub d_a: usize,
    pub d_q: usize,
    pub d_w: usize,
    pub d_dec: usize,
    pub attn_kernel: AttnKernel,
    pub conv1d_kernel: usize,
    pub temporal_rep: TemporalRep,
    pub multilevel_train: bool,
    pub multilevel_infer: bool,
    #[serde(alias = "λ")]
    pub lambda: f64,
    #[serde(alias = "ε")]
    pub epsilon: f64,
    pub max_query_len: usize,
    /// Filled in from the vocabulary when training starts.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::charades()
    }
}

impl ModelConfig {
    pub fn charades() -> Self {
        ModelConfig {
            t: 32,
            scales: CHARADES_SCALES.to_vec(),
            n_samples: 4,
            stride_rule: StrideRule::Dense,
            d_v: 4096,
            r: 8,
            d_vp: 256,
            d_vc: 256,
            d_a: 256,
            d_q: 256,
            d_w: 300,
            d_dec: 256,
            attn_kernel: AttnKernel::K3x3,
            conv1d_kernel: 3,
            temporal_rep: TemporalRep::Conv3d,
            multilevel_train: true,
            multilevel_infer: true,
            lambda: 1.0,
            epsilon: 0.1,
            max_query_len: crate::data_io::vocab::DEFAULT_MAX_QUERY_LEN,
            vocab_size: 0,
        }
    }

    pub fn activitynet() -> Self {
        ModelConfig {
            t: 128,
            scales: activitynet_scales(),
            stride_rule: StrideRule::SparseQuarter,
            r: 32,
            epsilon: 0.3,
            ..ModelConfig::charades()
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.d_v / self.r.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MarnError::Config(m));
        let dims = [
            ("T", self.t),
            ("N", self.n_samples),
            ("d_v", self.d_v),
            ("r", self.r),
            ("d_vp", self.d_vp),
            ("d_vc", self.d_vc),
            ("d_a", self.d_a),
            ("d_q", self.d_q),
            ("d_w", self.d_w),
            ("d_dec", self.d_dec),
            ("max_query_len", self.max_query_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be >= 1"));
        }
        if self.d_v % self.r != 0 {
            return err(format!("r = {} must divide d_v = {}", self.r, self.d_v));
        }
        if !matches!(self.conv1d_kernel, 1 | 3) {
            return err(format!("conv1d_kernel must be 1 or 3, got {}", self.conv1d_kernel));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return err(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.multilevel_infer && !self.multilevel_train {
            return err("multilevel_infer needs the clip branch, enable multilevel_train".into());
        }
        if self.multilevel_train && self.d_vp != self.d_vc {
            return err(format!(
                "the shared decoder needs d_vp == d_vc, got {} and {}",
                self.d_vp, self.d_vc
            ));
        }
        if self.vocab_size < crate::data_io::vocab::RESERVED.len() + 1 {
            return err(format!(
                "vocab_size {} leaves no room for words; build the vocabulary first",
                self.vocab_size
            ));
        }
        enumerate_proposals(self.t, &self.scales, self.stride_rule, self.n_samples)?;
        Ok(())
    }

    pub fn proposal_grid(&self) -> Result<ProposalGrid> {
        enumerate_proposals(self.t, &self.scales, self.stride_rule, self.n_samples)
    }

    pub fn clip_grid(&self) -> Result<ProposalGrid> {
        enumerate_proposals(self.t, &[1], StrideRule::Dense, self.n_samples)
    }
}

/// Trainable tensors of the temporal summary.
#[derive(Debug, Clone, PartialEq)]
pub enum TemporalParams {
    /// `(N * d_red) -> d` kernel spanning all samples.
    Conv3d(Linear),
    AvgPool(Linear),
    MaxPool(Linear),
    /// Runs over the samples with input `[x_n ; h]`.
    Recurrent(LstmCell),
}

impl TemporalParams {
    fn init(rep: TemporalRep, n: usize, d_red: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        match rep {
            // a (N x 1 x 1) 3D kernel: fan_in N*C_in, fan_out N*C_out
            TemporalRep::Conv3d => TemporalParams::Conv3d(Linear::glorot(
                n * d_red,
                d_out,
                n * d_red,
                n * d_out,
                rng,
            )),
            TemporalRep::AvgPool => {
                TemporalParams::AvgPool(Linear::glorot(d_red, d_out, d_red, d_out, rng))
            }
            TemporalRep::MaxPool => {
                TemporalParams::MaxPool(Linear::glorot(d_red, d_out, d_red, d_out, rng))
            }
            TemporalRep::Recurrent => {
                TemporalParams::Recurrent(LstmCell::glorot(d_red + d_out, d_out, rng))
            }
        }
    }

    pub fn rep(&self) -> TemporalRep {
        match self {
            TemporalParams::Conv3d(_) => TemporalRep::Conv3d,
            TemporalParams::AvgPool(_) => TemporalRep::AvgPool,
            TemporalParams::MaxPool(_) => TemporalRep::MaxPool,
            TemporalParams::Recurrent(_) => TemporalRep::Recurrent,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TemporalParams::Conv3d(l) | TemporalParams::AvgPool(l) | TemporalParams::MaxPool(l) => {
                l.outputs()
            }
            TemporalParams::Recurrent(c) => c.hidden(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TemporalParams::Conv3d(_) => "conv3d",
            TemporalParams::AvgPool(_) | TemporalParams::MaxPool(_) => "pool_proj",
            TemporalParams::Recurrent(_) => "temporal_lstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub branch: Branch,
    pub conv1d: Conv2d,
    pub temporal: TemporalParams,
    /// Conv stack producing one logit per cell, ReLU between layers.
    pub attention: Vec<Conv2d>,
}

impl BranchParams {
    fn init(config: &ModelConfig, branch: Branch, rng: &mut ChaCha8Rng) -> Self {
        let d_red = config.reduced_dim();
        let k = config.conv1d_kernel;
        let conv1d = Conv2d::glorot(k, 1, config.d_v, d_red, rng);
        let (d_out, attention) = match branch {
            Branch::Proposal => {
                let d = config.d_vp;
                let temporal = TemporalParams::init(config.temporal_rep, config.n_samples, d_red, d, rng);
                let mut layers = vec![Conv2d::glorot(3, 3, d + config.d_q, config.d_a, rng)];
                match config.attn_kernel {
                    AttnKernel::K1x1 => layers.push(Conv2d::glorot(1, 1, config.d_a, 1, rng)),
                    AttnKernel::K3x3 => layers.push(Conv2d::glorot(3, 3, config.d_a, 1, rng)),
                    AttnKernel::K3x3Stacked2 => {
                        layers.push(Conv2d::glorot(3, 3, config.d_a, config.d_a, rng));
                        layers.push(Conv2d::glorot(3, 3, config.d_a, 1, rng));
                    }
                }
                return BranchParams {
                    branch,
                    conv1d,
                    temporal,
                    attention: layers,
                };
            }
            Branch::Clip => {
                let d = config.d_vc;
                (d, vec![Conv2d::glorot(3, 3, d + config.d_q, 1, rng)])
            }
        };
        BranchParams {
            branch,
            conv1d,
            temporal: TemporalParams::init(config.temporal_rep, config.n_samples, d_red, d_out, rng),
            attention,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.temporal.output_dim()
    }

    fn attention_names(&self) -> Vec<&'static str> {
        match (self.branch, self.attention.len()) {
            (Branch::Clip, _) => vec!["clip_conv2d"],
            (Branch::Proposal, 2) => vec!["conv2d_1", "conv2d_2"],
            _ => vec!["conv2d_1", "conv2d_2a", "conv2d_2b"],
        }
    }
}

impl Parameters for BranchParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv1d.collect(&format!("{prefix}.conv1d"), out);
        let tname = format!("{prefix}.{}", self.temporal.name());
        match &self.temporal {
            TemporalParams::Conv3d(l) | TemporalParams::AvgPool(l) | TemporalParams::MaxPool(l) => {
                l.collect(&tname, out)
            }
            TemporalParams::Recurrent(c) => c.collect(&tname, out),
        }
        for (layer, name) in self.attention.iter().zip(self.attention_names()) {
            layer.collect(&format!("{prefix}.{name}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let names = self.attention_names();
        self.conv1d.collect_mut(&format!("{prefix}.conv1d"), out);
        let tname = format!("{prefix}.{}", self.temporal.name());
        match &mut self.temporal {
            TemporalParams::Conv3d(l) | TemporalParams::AvgPool(l) | TemporalParams::MaxPool(l) => {
                l.collect_mut(&tname, out)
            }
            TemporalParams::Recurrent(c) => c.collect_mut(&tname, out),
        }
        for (layer, name) in self.attention.iter_mut().zip(names) {
            layer.collect_mut(&format!("{prefix}.{name}"), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub proposal: BranchParams,
    /// Present iff `multilevel_train`.
    pub clip: Option<BranchParams>,
    pub query_encoder: Gru,
    /// Shared by both branches.
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases; fully determined by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proposal = BranchParams::init(config, Branch::Proposal, &mut rng);
        let clip = config
            .multilevel_train
            .then(|| BranchParams::init(config, Branch::Clip, &mut rng));
        let query_encoder = Gru::glorot(config.d_w, config.d_q, &mut rng);
        let decoder =
            DecoderParams::glorot(config.d_vp, config.d_dec, config.d_w, config.vocab_size, &mut rng);
        Ok(ModelParams {
            proposal,
            clip,
            query_encoder,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Rounds every value through `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }
}

impl Parameters for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.proposal.collect(&p("proposal"), out);
        if let Some(c) = &self.clip {
            c.collect(&p("clip"), out);
        }
        self.query_encoder.collect(&p("query_gru"), out);
        self.decoder.collect(&p("decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.proposal.collect_mut(&p("proposal"), out);
        if let Some(c) = &mut self.clip {
            c.collect_mut(&p("clip"), out);
        }
        self.query_encoder.collect_mut(&p("query_gru"), out);
        self.decoder.collect_mut(&p("decoder"), out);
    }
}

/// Normalised relevance over the cells of a branch's map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub branch: Branch,
    /// `T x S`; zero at invalid cells.
    pub scores: Array2<f64>,
    pub mask: Array2<bool>,
}

impl AttentionMap {
    pub fn valid_sum(&self) -> f64 {
        self.scores
            .iter()
            .zip(self.mask.iter())
            .filter(|(_, &m)| m)
            .map(|(s, _)| s)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub branch: Branch,
    pub vec: Array1<f64>,
}

fn check_conv1d(features: ArrayView2<f64>, conv1d: &Conv2d) -> Result<()> {
    if features.ncols() != conv1d.in_channels() {
        return Err(MarnError::Shape(format!(
            "features have {} channels, conv1d expects {}",
            features.ncols(),
            conv1d.in_channels()
        )));
    }
    Ok(())
}

/// Temporal conv with "same" zero padding followed by ReLU: `T x d_v -> T x d_red`.
pub fn reduce_dim(features: &VideoFeatures, conv1d: &Conv2d) -> Result<Array2<f64>> {
    check_conv1d(features.data.view(), conv1d)?;
    let (_, pre) = conv1d.forward(features.data.view(), features.len(), 1);
    Ok(relu(&pre))
}

enum TemporalCache {
    Affine { input: Array2<f64>, pre: Array2<f64> },
    Max { argmax: Array2<usize>, input: Array2<f64>, pre: Array2<f64> },
    Recurrent { steps: Vec<LstmStepCache> },
}

fn temporal_forward(
    params: &TemporalParams,
    sampled: &Array2<f64>,
    n: usize,
) -> Result<(Array2<f64>, TemporalCache)> {
    let rows = sampled.nrows();
    if sampled.ncols() % n != 0 {
        return Err(MarnError::Shape("sampled width is not a multiple of N".into()));
    }
    let d_red = sampled.ncols() / n;
    let check = |want: usize| {
        if want != d_red {
            Err(MarnError::Shape(format!(
                "temporal summary expects {want}-dim samples, got {d_red}"
            )))
        } else {
            Ok(())
        }
    };
    Ok(match params {
        TemporalParams::Conv3d(lin) => {
            if lin.inputs() != n * d_red {
                return Err(MarnError::Shape(format!(
                    "conv3d kernel spans {} inputs, samples provide {}",
                    lin.inputs(),
                    n * d_red
                )));
            }
            let pre = lin.forward(sampled.view());
            (relu(&pre), TemporalCache::Affine { input: sampled.clone(), pre })
        }
        TemporalParams::AvgPool(lin) => {
            check(lin.inputs())?;
            let mut pooled = Array2::<f64>::zeros((rows, d_red));
            for k in 0..n {
                pooled += &sampled.slice(s![.., k * d_red..(k + 1) * d_red]);
            }
            pooled /= n as f64;
            let pre = lin.forward(pooled.view());
            (relu(&pre), TemporalCache::Affine { input: pooled, pre })
        }
        TemporalParams::MaxPool(lin) => {
            check(lin.inputs())?;
            let mut pooled = Array2::<f64>::from_elem((rows, d_red), f64::NEG_INFINITY);
            let mut argmax = Array2::<usize>::zeros((rows, d_red));
            for r in 0..rows {
                for k in 0..n {
                    for c in 0..d_red {
                        let v = sampled[[r, k * d_red + c]];
                        if v > pooled[[r, c]] {
                            pooled[[r, c]] = v;
                            argmax[[r, c]] = k;
                        }
                    }
                }
            }
            let pre = lin.forward(pooled.view());
            (
                relu(&pre),
                TemporalCache::Max {
                    argmax,
                    input: pooled,
                    pre,
                },
            )
        }
        TemporalParams::Recurrent(cell) => {
            let hidden = cell.hidden();
            check(cell.input() - hidden)?;
            let mut h = Array2::<f64>::zeros((rows, hidden));
            let mut c = Array2::<f64>::zeros((rows, hidden));
            let mut steps = Vec::with_capacity(n);
            for k in 0..n {
                let mut z = Array2::<f64>::zeros((rows, d_red + hidden));
                z.slice_mut(s![.., ..d_red])
                    .assign(&sampled.slice(s![.., k * d_red..(k + 1) * d_red]));
                z.slice_mut(s![.., d_red..]).assign(&h);
                let (hn, cn, cache) = cell.step(z, &c);
                steps.push(cache);
                h = hn;
                c = cn;
            }
            (h, TemporalCache::Recurrent { steps })
        }
    })
}

fn temporal_backward(
    params: &TemporalParams,
    cache: &TemporalCache,
    dout: &Array2<f64>,
    n: usize,
    d_red: usize,
    grad: &mut TemporalParams,
) -> Array2<f64> {
    let rows = dout.nrows();
    match (params, cache, grad) {
        (TemporalParams::Conv3d(lin), TemporalCache::Affine { input, pre }, TemporalParams::Conv3d(g)) => {
            let dpre = relu_backward(dout, pre);
            lin.accumulate(input.view(), dpre.view(), g);
            lin.input_grad(dpre.view())
        }
        (TemporalParams::AvgPool(lin), TemporalCache::Affine { input, pre }, TemporalParams::AvgPool(g)) => {
            let dpre = relu_backward(dout, pre);
            lin.accumulate(input.view(), dpre.view(), g);
            let dpooled = lin.input_grad(dpre.view()) / n as f64;
            let mut dsampled = Array2::<f64>::zeros((rows, n * d_red));
            for k in 0..n {
                dsampled
                    .slice_mut(s![.., k * d_red..(k + 1) * d_red])
                    .assign(&dpooled);
            }
            dsampled
        }
        (
            TemporalParams::MaxPool(lin),
            TemporalCache::Max { argmax, input, pre },
            TemporalParams::MaxPool(g),
        ) => {
            let dpre = relu_backward(dout, pre);
            lin.accumulate(input.view(), dpre.view(), g);
            let dpooled = lin.input_grad(dpre.view());
            let mut dsampled = Array2::<f64>::zeros((rows, n * d_red));
            for ((r, c), &k) in argmax.indexed_iter() {
                dsampled[[r, k * d_red + c]] += dpooled[[r, c]];
            }
            dsampled
        }
        (TemporalParams::Recurrent(cell), TemporalCache::Recurrent { steps }, TemporalParams::Recurrent(g)) => {
            let hidden = cell.hidden();
            let mut dsampled = Array2::<f64>::zeros((rows, n * d_red));
            let mut dh = dout.clone();
            let mut dc = Array2::<f64>::zeros((rows, hidden));
            for (k, st) in steps.iter().enumerate().rev() {
                let (dz, dc_prev) = cell.step_backward(st, &dh, &dc, g);
                dsampled
                    .slice_mut(s![.., k * d_red..(k + 1) * d_red])
                    .assign(&dz.slice(s![.., ..d_red]));
                dh = dz.slice(s![.., d_red..]).to_owned();
                dc = dc_prev;
            }
            dsampled
        }
        _ => unreachable!("gradient and parameter variants always match"),
    }
}

/// Summarises each valid proposal's `N` samples into one `d`-dim vector:
/// `T x S x N x d_red -> T x S x d`, zero at invalid cells.
pub fn summarize_proposals(
    sampled: &SampledProposalTensor,
    temporal: &TemporalParams,
    grid: &ProposalGrid,
) -> Result<Array3<f64>> {
    let (t, s_count, n, d_red) = sampled.data.dim();
    if (t, s_count, n) != (grid.t(), grid.n_scales(), grid.n_samples()) {
        return Err(MarnError::Shape("sampled tensor does not match the grid".into()));
    }
    let cells = grid.valid_cells();
    let mut rows = Array2::<f64>::zeros((cells.len(), n * d_red));
    for (k, &(i, j)) in cells.iter().enumerate() {
        for p in 0..n {
            rows.slice_mut(s![k, p * d_red..(p + 1) * d_red])
                .assign(&sampled.data.slice(s![i, j, p, ..]));
        }
    }
    let (out, _) = temporal_forward(temporal, &rows, n)?;
    let d = out.ncols();
    let mut map = Array3::<f64>::zeros((t, s_count, d));
    for (k, &(i, j)) in cells.iter().enumerate() {
        map.slice_mut(s![i, j, ..]).assign(&out.row(k));
    }
    Ok(map)
}

/// Final GRU state over the `M` real query tokens.
pub fn encode_query_global(query: &QueryTokens, gru: &Gru) -> Result<Array1<f64>> {
    if query.embeddings.ncols() != gru.input_size() {
        return Err(MarnError::Shape(format!(
            "query embeddings are {}-dim, encoder expects {}",
            query.embeddings.ncols(),
            gru.input_size()
        )));
    }
    Ok(gru.forward(query.embeddings.view()).0)
}

struct AttentionCache {
    cols: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
    probs: Vec<f64>,
}

fn fuse(features: ArrayView2<f64>, fq: ArrayView1<f64>) -> Array2<f64> {
    let (cells, d) = features.dim();
    let mut fa = Array2::<f64>::zeros((cells, d + fq.len()));
    fa.slice_mut(s![.., ..d]).assign(&features);
    fa.slice_mut(s![.., d..]).assign(&fq.broadcast((cells, fq.len())).unwrap());
    fa
}

fn attention_forward(
    features: ArrayView2<f64>,
    fq: ArrayView1<f64>,
    layers: &[Conv2d],
    mask: &Array2<bool>,
) -> Result<(Vec<f64>, AttentionCache)> {
    let (rows, cols) = mask.dim();
    let expected = layers[0].in_channels();
    if features.ncols() + fq.len() != expected {
        return Err(MarnError::Shape(format!(
            "fused features are {}-dim, attention expects {expected}",
            features.ncols() + fq.len()
        )));
    }
    let mut x = fuse(features, fq);
    let mut cols_cache = Vec::with_capacity(layers.len());
    let mut pres = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let (col, pre) = layer.forward(x.view(), rows, cols);
        if l + 1 < layers.len() {
            x = relu(&pre);
        }
        cols_cache.push(col);
        pres.push(pre);
    }
    let logits: Vec<f64> = pres.last().unwrap().column(0).to_vec();
    let mask_flat: Vec<bool> = mask.iter().copied().collect();
    let probs = masked_softmax(&logits, &mask_flat)?;
    Ok((
        probs.clone(),
        AttentionCache {
            cols: cols_cache,
            pres,
            probs,
        },
    ))
}

/// Pre-softmax attention logits, `T x S` (invalid cells included).
pub fn attention_logits(
    branch_features: &Array3<f64>,
    fq: ArrayView1<f64>,
    layers: &[Conv2d],
) -> Result<Array2<f64>> {
    let (t, s_count, d) = branch_features.dim();
    let flat = branch_features.view().into_shape_with_order((t * s_count, d)).unwrap();
    let all = Array2::from_elem((t, s_count), true);
    let (_, cache) = attention_forward(flat, fq, layers, &all)?;
    Ok(cache
        .pres
        .last()
        .unwrap()
        .column(0)
        .to_owned()
        .into_shape_with_order((t, s_count))
        .unwrap())
}

/// Fuses features with the tiled query, scores every cell with the conv
/// stack and normalises over the valid cells.
pub fn compute_attention(
    branch: Branch,
    branch_features: &Array3<f64>,
    fq: ArrayView1<f64>,
    layers: &[Conv2d],
    mask: &Array2<bool>,
) -> Result<AttentionMap> {
    let (t, s_count, d) = branch_features.dim();
    if mask.dim() != (t, s_count) {
        return Err(MarnError::Shape("mask does not match the feature map".into()));
    }
    let flat = branch_features.view().into_shape_with_order((t * s_count, d)).unwrap();
    let (probs, _) = attention_forward(flat, fq, layers, mask)?;
    Ok(AttentionMap {
        branch,
        scores: Array2::from_shape_vec((t, s_count), probs).unwrap(),
        mask: mask.clone(),
    })
}

/// Attention-weighted sum of the branch features over valid cells.
pub fn attend_global(branch_features: &Array3<f64>, attn: &AttentionMap) -> Result<GlobalFeature> {
    let (t, s_count, d) = branch_features.dim();
    if attn.scores.dim() != (t, s_count) {
        return Err(MarnError::Shape("attention does not match the feature map".into()));
    }
    let mut vec = Array1::<f64>::zeros(d);
    for ((i, j), &w) in attn.scores.indexed_iter() {
        if attn.mask[[i, j]] && w != 0.0 {
            vec.scaled_add(w, &branch_features.slice(s![i, j, ..]));
        }
    }
    Ok(GlobalFeature {
        branch: attn.branch,
        vec,
    })
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `T x S x d`, zero at invalid cells.
    pub features: Array3<f64>,
    pub attention: AttentionMap,
    pub global: GlobalFeature,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub query: Array1<f64>,
    pub proposal: BranchOutput,
    pub clip: Option<BranchOutput>,
}

struct BranchCache {
    conv1d_col: Array2<f64>,
    conv1d_pre: Array2<f64>,
    d_red: usize,
    temporal: TemporalCache,
    attention: AttentionCache,
}

/// Loss terms of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proposal: CaptionLoss,
    pub clip: Option<CaptionLoss>,
    pub total: f64,
}

/// A configured network: parameters plus the cached sampling maps.
#[derive(Debug, Clone)]
pub struct Marn {
    pub config: ModelConfig,
    pub params: ModelParams,
    proposal_map: SamplingMap,
    clip_map: SamplingMap,
}

impl Marn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Marn::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::init(&config, 0)?;
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len()
            || want
                .iter()
                .zip(&got)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(MarnError::Shape(
                "parameter tensors do not match the model configuration".into(),
            ));
        }
        let proposal_map = build_sampling_map(&config.proposal_grid()?);
        let clip_map = build_sampling_map(&config.clip_grid()?);
        Ok(Marn {
            config,
            params,
            proposal_map,
            clip_map,
        })
    }

    pub fn proposal_map(&self) -> &SamplingMap {
        &self.proposal_map
    }

    pub fn clip_map(&self) -> &SamplingMap {
        &self.clip_map
    }

    pub fn grid(&self) -> &ProposalGrid {
        self.proposal_map.grid()
    }

    fn check_video(&self, video: &VideoFeatures) -> Result<()> {
        if video.len() != self.config.t || video.dim() != self.config.d_v {
            return Err(MarnError::Shape(format!(
                "video {} is {}x{}, model expects {}x{}",
                video.video_id,
                video.len(),
                video.dim(),
                self.config.t,
                self.config.d_v
            )));
        }
        Ok(())
    }

    fn branch_forward(
        &self,
        params: &BranchParams,
        map: &SamplingMap,
        video: &VideoFeatures,
        fq: ArrayView1<f64>,
    ) -> Result<(BranchOutput, BranchCache)> {
        let grid = map.grid();
        let (t, s_count) = (grid.t(), grid.n_scales());
        check_conv1d(video.data.view(), &params.conv1d)?;
        let (conv1d_col, conv1d_pre) = params.conv1d.forward(video.data.view(), t, 1);
        let reduced = relu(&conv1d_pre);
        let d_red = reduced.ncols();
        let sampled = map.sample_valid(reduced.view())?;
        let (summary, temporal) = temporal_forward(&params.temporal, &sampled, grid.n_samples())?;
        let d = summary.ncols();
        let mut flat = Array2::<f64>::zeros((t * s_count, d));
        for (k, &(i, j)) in map.valid_cells().iter().enumerate() {
            flat.row_mut(grid.cell(i, j)).assign(&summary.row(k));
        }
        let (probs, attention) = attention_forward(flat.view(), fq, &params.attention, grid.valid())?;
        let mut global = Array1::<f64>::zeros(d);
        for (c, &w) in probs.iter().enumerate() {
            if w != 0.0 {
                global.scaled_add(w, &flat.row(c));
            }
        }
        let output = BranchOutput {
            features: flat.into_shape_with_order((t, s_count, d)).unwrap(),
            attention: AttentionMap {
                branch: params.branch,
                scores: Array2::from_shape_vec((t, s_count), probs).unwrap(),
                mask: grid.valid().clone(),
            },
            global: GlobalFeature {
                branch: params.branch,
                vec: global,
            },
        };
        Ok((
            output,
            BranchCache {
                conv1d_col,
                conv1d_pre,
                d_red,
                temporal,
                attention,
            },
        ))
    }

    /// Returns the gradient with respect to the query vector.
    fn branch_backward(
        &self,
        params: &BranchParams,
        map: &SamplingMap,
        output: &BranchOutput,
        cache: &BranchCache,
        dglobal: ArrayView1<f64>,
        grad: &mut BranchParams,
    ) -> Array1<f64> {
        let grid = map.grid();
        let (t, s_count) = (grid.t(), grid.n_scales());
        let d = output.global.vec.len();
        let flat = output.features.view().into_shape_with_order((t * s_count, d)).unwrap();
        let probs = &cache.attention.probs;

        // global = sum_c p_c f_c
        let mut dflat = Array2::<f64>::zeros((t * s_count, d));
        let mut dprobs = vec![0.0; t * s_count];
        for (c, &p) in probs.iter().enumerate() {
            if grid.valid().as_slice().unwrap()[c] {
                dflat.row_mut(c).scaled_add(p, &dglobal);
                dprobs[c] = flat.row(c).dot(&dglobal);
            }
        }
        let dlogits = softmax_backward(probs, &dprobs);

        let mut dy = Array2::from_shape_vec((t * s_count, 1), dlogits).unwrap();
        let n_layers = params.attention.len();
        let mut dfa = None;
        for l in (0..n_layers).rev() {
            let want_input = true;
            let dx = params.attention[l]
                .backward(
                    &cache.attention.cols[l],
                    &dy,
                    t,
                    s_count,
                    &mut grad.attention[l],
                    want_input,
                )
                .unwrap();
            if l > 0 {
                dy = relu_backward(&dx, &cache.attention.pres[l - 1]);
            } else {
                dfa = Some(dx);
            }
        }
        let dfa = dfa.unwrap();
        dflat += &dfa.slice(s![.., ..d]);
        let dfq = dfa.slice(s![.., d..]).sum_axis(Axis(0));

        let cells = map.valid_cells();
        let mut dsummary = Array2::<f64>::zeros((cells.len(), d));
        for (k, &(i, j)) in cells.iter().enumerate() {
            dsummary.row_mut(k).assign(&dflat.row(grid.cell(i, j)));
        }
        let dsampled = temporal_backward(
            &params.temporal,
            &cache.temporal,
            &dsummary,
            grid.n_samples(),
            cache.d_red,
            &mut grad.temporal,
        );
        let dreduced = map.scatter_valid(dsampled.view(), cache.d_red);
        let dpre = relu_backward(&dreduced, &cache.conv1d_pre);
        params
            .conv1d
            .backward(&cache.conv1d_col, &dpre, t, 1, &mut grad.conv1d, false);
        dfq
    }

    /// Runs the proposal branch and, when trained with it, the clip branch.
    pub fn forward(&self, video: &VideoFeatures, query: &QueryTokens) -> Result<ForwardOutput> {
        self.check_video(video)?;
        let fq = encode_query_global(query, &self.params.query_encoder)?;
        let (proposal, _) = self.branch_forward(&self.params.proposal, &self.proposal_map, video, fq.view())?;
        let clip = match &self.params.clip {
            Some(cp) => Some(self.branch_forward(cp, &self.clip_map, video, fq.view())?.0),
            None => None,
        };
        Ok(ForwardOutput {
            query: fq,
            proposal,
            clip,
        })
    }

    pub fn loss(&self, video: &VideoFeatures, query: &QueryTokens) -> Result<LossBreakdown> {
        let out = self.forward(video, query)?;
        let proposal = crate::reconstruction::caption_loss(&out.proposal.global, query, &self.params.decoder)?;
        let clip = match &out.clip {
            Some(c) => Some(crate::reconstruction::caption_loss(&c.global, query, &self.params.decoder)?),
            None => None,
        };
        let total = total_loss(&proposal, clip.as_ref(), self.config.lambda);
        Ok(LossBreakdown {
            proposal,
            clip,
            total,
        })
    }

    /// Loss of one sample together with the gradient of `total` with respect
    /// to every parameter.
    pub fn loss_and_grad(
        &self,
        video: &VideoFeatures,
        query: &QueryTokens,
    ) -> Result<(LossBreakdown, ModelParams)> {
        self.check_video(video)?;
        let p = &self.params;
        let (fq, gru_cache): (Array1<f64>, GruCache) = {
            encode_query_global(query, &p.query_encoder)?;
            p.query_encoder.forward(query.embeddings.view())
        };
        let mut grad = p.zeros_like();

        let (p_out, p_cache) = self.branch_forward(&p.proposal, &self.proposal_map, video, fq.view())?;
        let (lp, lp_cache) = caption_loss_cached(&p_out.global, query, &p.decoder)?;
        let dglobal = caption_loss_backward(&p.decoder, &lp_cache, 1.0, &mut grad.decoder);
        let mut dfq = self.branch_backward(
            &p.proposal,
            &self.proposal_map,
            &p_out,
            &p_cache,
            dglobal.view(),
            &mut grad.proposal,
        );

        let mut lc = None;
        if let (Some(cp), Some(cg)) = (&p.clip, grad.clip.as_mut()) {
            let (c_out, c_cache) = self.branch_forward(cp, &self.clip_map, video, fq.view())?;
            let (loss, cache) = caption_loss_cached(&c_out.global, query, &p.decoder)?;
            let dglobal =
                caption_loss_backward(&p.decoder, &cache, self.config.lambda, &mut grad.decoder);
            dfq += &self.branch_backward(cp, &self.clip_map, &c_out, &c_cache, dglobal.view(), cg);
            lc = Some(loss);
        }
        p.query_encoder
            .backward(&gru_cache, dfq.view(), &mut grad.query_encoder);
        let total = total_loss(&lp, lc.as_ref(), self.config.lambda);
        Ok((
            LossBreakdown {
                proposal: lp,
                clip: lc,
                total,
            },
            grad,
        ))
    }
}
