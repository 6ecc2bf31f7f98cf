//! Query reconstruction from an attended global feature.
//!
//! An LSTM decoder, shared by both branches, re-generates the query word by
//! word under teacher forcing. At step `m` the cell sees
//! `[global ; h_{m-1} ; e_{m-1}]` (with `e_0` the `<bos>` embedding) and a
//! linear layer on `h_m` scores the vocabulary. The caption loss is the mean
//! negative log-likelihood over the `M` real tokens, EOS included.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::QueryTokens;
use crate::error::{MarnError, Result};
use crate::model::{Branch, GlobalFeature};
use crate::nn::{log_softmax, Linear, LstmCell, LstmStepCache, ParamMut, ParamRef, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Input width `d_global + d_dec + d_w`, hidden `d_dec`.
    pub lstm: LstmCell,
    /// `d_dec -> |V|`.
    pub output: Linear,
}

impl DecoderParams {
    pub fn glorot<R: Rng>(d_global: usize, d_dec: usize, d_w: usize, vocab: usize, rng: &mut R) -> Self {
        DecoderParams {
            lstm: LstmCell::glorot(d_global + d_dec + d_w, d_dec, rng),
            output: Linear::glorot(d_dec, vocab, d_dec, vocab, rng),
        }
    }

    pub fn zeros(d_global: usize, d_dec: usize, d_w: usize, vocab: usize) -> Self {
        DecoderParams {
            lstm: LstmCell::zeros(d_global + d_dec + d_w, d_dec),
            output: Linear::zeros(d_dec, vocab),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn vocab_size(&self) -> usize {
        self.output.outputs()
    }

    fn word_dim(&self, d_global: usize) -> Result<usize> {
        self.lstm
            .input()
            .checked_sub(d_global + self.hidden())
            .ok_or_else(|| {
                MarnError::Shape(format!(
                    "decoder input width {} cannot hold a {d_global}-dim global feature",
                    self.lstm.input()
                ))
            })
    }
}

impl Parameters for DecoderParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.lstm.collect(&format!("{prefix}.lstm"), out);
        self.output.collect(&format!("{prefix}.output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.lstm.collect_mut(&format!("{prefix}.lstm"), out);
        self.output.collect_mut(&format!("{prefix}.output"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl DecoderState {
    pub fn zeros(d_dec: usize) -> Self {
        DecoderState {
            h: Array1::zeros(d_dec),
            c: Array1::zeros(d_dec),
        }
    }
}

fn step_input(global: ArrayView1<f64>, h: ArrayView1<f64>, e: ArrayView1<f64>) -> Array2<f64> {
    let (g, d, w) = (global.len(), h.len(), e.len());
    let mut z = Array2::<f64>::zeros((1, g + d + w));
    z.slice_mut(s![0, 0..g]).assign(&global);
    z.slice_mut(s![0, g..g + d]).assign(&h);
    z.slice_mut(s![0, g + d..]).assign(&e);
    z
}

/// One decoder step. Returns the next state and the vocabulary logits.
pub fn decode_word_step(
    global: &GlobalFeature,
    state: &DecoderState,
    e_prev: ArrayView1<f64>,
    params: &DecoderParams,
) -> Result<(DecoderState, Array1<f64>)> {
    let d_w = params.word_dim(global.vec.len())?;
    if e_prev.len() != d_w {
        return Err(MarnError::Shape(format!(
            "decoder expects {d_w}-dim word embeddings, got {}",
            e_prev.len()
        )));
    }
    let z = step_input(global.vec.view(), state.h.view(), e_prev);
    let c_prev = state.c.view().insert_axis(Axis(0)).to_owned();
    let (h, c, _) = params.lstm.step(z, &c_prev);
    let logits = params.output.forward_vec(h.row(0));
    Ok((
        DecoderState {
            h: h.row(0).to_owned(),
            c: c.row(0).to_owned(),
        },
        logits,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLoss {
    pub branch: Branch,
    /// Mean negative log-likelihood, nats per word.
    pub value: f64,
    pub per_word: Vec<f64>,
}

struct DecodeStep {
    lstm: LstmStepCache,
    h: Array2<f64>,
    probs: Array1<f64>,
    target: usize,
}

pub(crate) struct CaptionCache {
    d_global: usize,
    steps: Vec<DecodeStep>,
}

pub(crate) fn caption_loss_cached(
    global: &GlobalFeature,
    query: &QueryTokens,
    params: &DecoderParams,
) -> Result<(CaptionLoss, CaptionCache)> {
    let d_global = global.vec.len();
    let d_w = params.word_dim(d_global)?;
    if query.embeddings.ncols() != d_w || query.bos_embedding.len() != d_w {
        return Err(MarnError::Shape(format!(
            "decoder expects {d_w}-dim word embeddings, query carries {}",
            query.embeddings.ncols()
        )));
    }
    let vocab = params.vocab_size();
    let d_dec = params.hidden();
    let mut h = Array2::<f64>::zeros((1, d_dec));
    let mut c = Array2::<f64>::zeros((1, d_dec));
    let mut steps = Vec::with_capacity(query.len);
    let mut per_word = Vec::with_capacity(query.len);
    for (m, &target) in query.real_ids().iter().enumerate() {
        if target >= vocab {
            return Err(MarnError::Shape(format!(
                "token id {target} outside a {vocab}-word output layer"
            )));
        }
        let e_prev = if m == 0 {
            query.bos_embedding.view()
        } else {
            query.embeddings.row(m - 1)
        };
        let z = step_input(global.vec.view(), h.row(0), e_prev);
        let (h_next, c_next, lstm) = params.lstm.step(z, &c);
        let logp = log_softmax(params.output.forward_vec(h_next.row(0)).view());
        per_word.push(-logp[target]);
        steps.push(DecodeStep {
            lstm,
            h: h_next.clone(),
            probs: logp.mapv(f64::exp),
            target,
        });
        h = h_next;
        c = c_next;
    }
    let value = per_word.iter().sum::<f64>() / per_word.len() as f64;
    Ok((
        CaptionLoss {
            branch: global.branch,
            value,
            per_word,
        },
        CaptionCache { d_global, steps },
    ))
}

/// Teacher-forced reconstruction loss of `query` from `global`.
pub fn caption_loss(
    global: &GlobalFeature,
    query: &QueryTokens,
    params: &DecoderParams,
) -> Result<CaptionLoss> {
    caption_loss_cached(global, query, params).map(|(l, _)| l)
}

/// Backpropagates `weight * loss.value`. Accumulates decoder gradients and
/// returns the gradient with respect to the global feature.
pub(crate) fn caption_loss_backward(
    params: &DecoderParams,
    cache: &CaptionCache,
    weight: f64,
    grad: &mut DecoderParams,
) -> Array1<f64> {
    let d_dec = params.hidden();
    let g = cache.d_global;
    let scale = weight / cache.steps.len() as f64;
    let mut dglobal = Array1::<f64>::zeros(g);
    let mut dh_next = Array2::<f64>::zeros((1, d_dec));
    let mut dc_next = Array2::<f64>::zeros((1, d_dec));
    for st in cache.steps.iter().rev() {
        let mut dlogits = st.probs.clone();
        dlogits[st.target] -= 1.0;
        dlogits *= scale;
        let dlogits = dlogits.insert_axis(Axis(0));
        params
            .output
            .accumulate(st.h.view(), dlogits.view(), &mut grad.output);
        let dh = params.output.input_grad(dlogits.view()) + &dh_next;
        let (dz, dc_prev) = params.lstm.step_backward(&st.lstm, &dh, &dc_next, &mut grad.lstm);
        dglobal += &dz.slice(s![0, 0..g]);
        dh_next = dz.slice(s![.., g..g + d_dec]).to_owned();
        dc_next = dc_prev;
    }
    dglobal
}

/// `L_p + lambda * L_c`, or `L_p` alone without a clip branch.
pub fn total_loss(proposal: &CaptionLoss, clip: Option<&CaptionLoss>, lambda: f64) -> f64 {
    combine_losses(proposal.value, clip.map(|c| c.value), lambda)
}

pub fn combine_losses(proposal: f64, clip: Option<f64>, lambda: f64) -> f64 {
    match clip {
        Some(c) => proposal + lambda * c,
        None => proposal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn global(v: Vec<f64>) -> GlobalFeature {
        GlobalFeature {
            branch: Branch::Proposal,
            vec: Array1::from(v),
        }
    }

    fn query(ids: &[usize], d_w: usize, max_len: usize) -> QueryTokens {
        let mut padded = ids.to_vec();
        padded.resize(max_len, 0);
        QueryTokens {
            ids: padded,
            len: ids.len(),
            embeddings: Array2::from_shape_fn((ids.len(), d_w), |(m, k)| {
                ((ids[m] * 7 + k) % 5) as f64 * 0.1 - 0.2
            }),
            bos_embedding: Array1::from_elem(d_w, 0.05),
        }
    }

    #[test]
    fn zero_decoder_is_uniform() {
        let params = DecoderParams::zeros(3, 4, 2, 7);
        let g = global(vec![1.0, -2.0, 0.5]);
        let (state, logits) =
            decode_word_step(&g, &DecoderState::zeros(4), array![0.3, 0.1].view(), &params).unwrap();
        assert!(state.h.iter().all(|&v| v == 0.0));
        assert!(logits.iter().all(|&v| v == 0.0));
        let loss = caption_loss(&g, &query(&[4, 5, 2], 2, 6), &params).unwrap();
        assert!((loss.value - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_matches_hand_unrolled_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (dg, dd, dw, v) = (3, 4, 2, 5);
        let params = DecoderParams::glorot(dg, dd, dw, v, &mut rng);
        let g = global(vec![0.2, -0.4, 0.9]);
        let state = DecoderState {
            h: array![0.1, -0.2, 0.3, 0.0],
            c: array![0.5, 0.1, -0.3, 0.2],
        };
        let e = array![0.7, -0.1];
        let (next, logits) = decode_word_step(&g, &state, e.view(), &params).unwrap();

        // oracle: explicit per-unit gate equations
        let z: Vec<f64> = g.vec.iter().chain(state.h.iter()).chain(e.iter()).copied().collect();
        let w = &params.lstm.linear.weight;
        let b = &params.lstm.linear.bias;
        let pre = |col: usize| b[col] + z.iter().enumerate().map(|(r, zr)| zr * w[[r, col]]).sum::<f64>();
        for u in 0..dd {
            let i = sigmoid(pre(u));
            let f = sigmoid(pre(dd + u));
            let gg = pre(2 * dd + u).tanh();
            let o = sigmoid(pre(3 * dd + u));
            let c = f * state.c[u] + i * gg;
            let h = o * c.tanh();
            assert!((next.c[u] - c).abs() < 1e-12);
            assert!((next.h[u] - h).abs() < 1e-12);
        }
        for k in 0..v {
            let want = params.output.bias[k]
                + (0..dd).map(|u| next.h[u] * params.output.weight[[u, k]]).sum::<f64>();
            assert!((logits[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_ignores_padding_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DecoderParams::glorot(3, 4, 2, 8, &mut rng);
        let g = global(vec![0.1, 0.2, 0.3]);
        let a = query(&[4, 6, 2], 2, 6);
        let mut b = a.clone();
        b.ids[4] = 7;
        b.ids[5] = 5;
        let la = caption_loss(&g, &a, &params).unwrap();
        let lb = caption_loss(&g, &b, &params).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.per_word.len(), 3);
        let mean = la.per_word.iter().sum::<f64>() / 3.0;
        assert!((la.value - mean).abs() < 1e-15);
        assert!(la.per_word.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn total_loss_combination() {
        let l = |v| CaptionLoss {
            branch: Branch::Proposal,
            value: v,
            per_word: vec![v],
        };
        assert_eq!(total_loss(&l(1.2), Some(&l(0.8)), 1.0), 2.0);
        assert_eq!(total_loss(&l(1.2), Some(&l(0.8)), 0.0), 1.2);
        assert_eq!(total_loss(&l(1.2), None, 5.0), 1.2);
    }

    #[test]
    fn confident_decoder_drives_loss_to_zero() {
        // a huge output bias on the right token at every step
        let mut params = DecoderParams::zeros(2, 3, 2, 6);
        params.output.bias[4] = 60.0;
        let g = global(vec![0.0, 0.0]);
        let loss = caption_loss(&g, &query(&[4, 4, 4], 2, 4), &params).unwrap();
        assert!(loss.value < 1e-20);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = DecoderParams::glorot(3, 4, 2, 6, &mut rng);
        let q = query(&[4, 5, 3, 2], 2, 6);
        let g = global(vec![0.3, -0.7, 0.2]);
        let (_, cache) = caption_loss_cached(&g, &q, &params).unwrap();
        let mut grad = DecoderParams::zeros(3, 4, 2, 6);
        let dglobal = caption_loss_backward(&params, &cache, 1.0, &mut grad);
        let h = 1e-6;
        for k in 0..3 {
            let mut gp = g.clone();
            gp.vec[k] += h;
            let mut gm = g.clone();
            gm.vec[k] -= h;
            let fd = (caption_loss(&gp, &q, &params).unwrap().value
                - caption_loss(&gm, &q, &params).unwrap().value)
                / (2.0 * h);
            assert!((fd - dglobal[k]).abs() < 1e-7, "{fd} vs {}", dglobal[k]);
        }
        let w = grad.lstm.linear.weight[[5, 3]];
        let mut pp = params.clone();
        pp.lstm.linear.weight[[5, 3]] += h;
        let mut pm = params.clone();
        pm.lstm.linear.weight[[5, 3]] -= h;
        let fd = (caption_loss(&g, &q, &pp).unwrap().value - caption_loss(&g, &q, &pm).unwrap().value)
            / (2.0 * h);
        assert!((fd - w).abs() < 1e-7);
    }
}
