//! Minimal dense building blocks with hand-written backward passes.
//!
//! Everything runs in `f64`. Layers keep no state between calls: forward
//! functions return a cache that the matching backward function consumes,
//! and parameter gradients accumulate into a gradient struct of the same type.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{MarnError, Result};

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_ref<'a, D: Dimension>(
    out: &mut Vec<ParamRef<'a>>,
    prefix: &str,
    name: &str,
    a: &'a ndarray::Array<f64, D>,
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters use standard layout"),
    });
}

pub(crate) fn push_mut<'a, D: Dimension>(
    out: &mut Vec<ParamMut<'a>>,
    prefix: &str,
    name: &str,
    a: &'a mut ndarray::Array<f64, D>,
) {
    let shape = a.shape().to_vec();
    out.push(ParamMut {
        name: join(prefix, name),
        shape,
        data: a.as_slice_mut().expect("parameters use standard layout"),
    });
}

/// Enumeration of trainable tensors in a fixed order. Gradients, optimizer
/// moments and checkpoints all rely on that order being identical for two
/// values built from the same configuration.
pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Uniform Glorot initialisation bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Affine map `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn glorot<R: Rng>(
        inputs: usize,
        outputs: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let a = glorot_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        Linear {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || dist.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates `dW += x^T dy`, `db += sum(dy)`.
    pub fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn input_grad(&self, dy: ArrayView2<f64>) -> Array2<f64> {
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_ref(out, prefix, "weight", &self.weight);
        push_ref(out, prefix, "bias", &self.bias);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_mut(out, prefix, "weight", &mut self.weight);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation.
pub fn relu_backward(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    ndarray::Zip::from(&mut d).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unrolls "same"-padded `kh x kw` neighbourhoods of a `rows x cols` grid of
/// `C`-channel cells into `(rows*cols) x (kh*kw*C)`. Taps outside the grid
/// read zeros.
pub fn im2col(x: ArrayView2<f64>, rows: usize, cols: usize, kh: usize, kw: usize) -> Array2<f64> {
    let c = x.ncols();
    debug_assert_eq!(x.nrows(), rows * cols);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Array2::<f64>::zeros((rows * cols, kh * kw * c));
    for i in 0..rows {
        for j in 0..cols {
            let mut dst = out.row_mut(i * cols + j);
            for di in 0..kh {
                let Some(si) = (i + di).checked_sub(ph).filter(|&v| v < rows) else {
                    continue;
                };
                for dj in 0..kw {
                    let Some(sj) = (j + dj).checked_sub(pw).filter(|&v| v < cols) else {
                        continue;
                    };
                    let off = (di * kw + dj) * c;
                    dst.slice_mut(s![off..off + c]).assign(&x.row(si * cols + sj));
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im(
    dcol: ArrayView2<f64>,
    rows: usize,
    cols: usize,
    kh: usize,
    kw: usize,
    c: usize,
) -> Array2<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Array2::<f64>::zeros((rows * cols, c));
    for i in 0..rows {
        for j in 0..cols {
            let src = dcol.row(i * cols + j);
            for di in 0..kh {
                let Some(si) = (i + di).checked_sub(ph).filter(|&v| v < rows) else {
                    continue;
                };
                for dj in 0..kw {
                    let Some(sj) = (j + dj).checked_sub(pw).filter(|&v| v < cols) else {
                        continue;
                    };
                    let off = (di * kw + dj) * c;
                    let mut dst = out.row_mut(si * cols + sj);
                    dst += &src.slice(s![off..off + c]);
                }
            }
        }
    }
    out
}

/// Stride-1 "same" convolution over a 2D grid of cells (a 1D temporal
/// convolution is the `kw = 1`, `cols = 1` case).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub linear: Linear,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2d {
    pub fn glorot<R: Rng>(kh: usize, kw: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let taps = kh * kw;
        Conv2d {
            linear: Linear::glorot(taps * c_in, c_out, taps * c_in, taps * c_out, rng),
            kh,
            kw,
        }
    }

    pub fn zeros(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        Conv2d {
            linear: Linear::zeros(kh * kw * c_in, c_out),
            kh,
            kw,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.linear.inputs() / (self.kh * self.kw)
    }

    pub fn out_channels(&self) -> usize {
        self.linear.outputs()
    }

    /// Returns `(im2col matrix, pre-activation output)`.
    pub fn forward(&self, x: ArrayView2<f64>, rows: usize, cols: usize) -> (Array2<f64>, Array2<f64>) {
        let col = im2col(x, rows, cols, self.kh, self.kw);
        let y = self.linear.forward(col.view());
        (col, y)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        col: &Array2<f64>,
        dy: &Array2<f64>,
        rows: usize,
        cols: usize,
        grad: &mut Conv2d,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        self.linear.accumulate(col.view(), dy.view(), &mut grad.linear);
        want_input.then(|| {
            let dcol = self.linear.input_grad(dy.view());
            col2im(dcol.view(), rows, cols, self.kh, self.kw, self.in_channels())
        })
    }
}

impl Parameters for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.linear.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.linear.collect_mut(prefix, out);
    }
}

/// LSTM cell applied to a pre-concatenated input `z` (whatever the caller
/// wants the gates to see, typically `[x ; h_prev]`). Gate order `i f g o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub linear: Linear,
}

pub struct LstmStepCache {
    z: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmCell {
    pub fn glorot<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmCell {
            linear: Linear::glorot(input, 4 * hidden, input, 4 * hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            linear: Linear::zeros(input, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.linear.outputs() / 4
    }

    pub fn input(&self) -> usize {
        self.linear.inputs()
    }

    /// One step for a batch of rows. Returns `(h, c, cache)`.
    pub fn step(&self, z: Array2<f64>, c_prev: &Array2<f64>) -> (Array2<f64>, Array2<f64>, LstmStepCache) {
        let h = self.hidden();
        let gates = self.linear.forward(z.view());
        let i = gates.slice(s![.., 0..h]).mapv(sigmoid);
        let f = gates.slice(s![.., h..2 * h]).mapv(sigmoid);
        let g = gates.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
        let o = gates.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);
        let c = &f * c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h_out = &o * &tanh_c;
        let cache = LstmStepCache {
            z,
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        (h_out, c, cache)
    }

    /// Given `dL/dh` and `dL/dc` at this step's outputs, accumulates
    /// parameter gradients and returns `(dL/dz, dL/dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &Array2<f64>,
        dc: &Array2<f64>,
        grad: &mut LstmCell,
    ) -> (Array2<f64>, Array2<f64>) {
        let h = self.hidden();
        let rows = dh.nrows();
        let d_o = dh * &cache.tanh_c;
        let dc_total = dc + &(dh * &cache.o * &cache.tanh_c.mapv(|t| 1.0 - t * t));
        let d_i = &dc_total * &cache.g;
        let d_g = &dc_total * &cache.i;
        let d_f = &dc_total * &cache.c_prev;
        let dc_prev = &dc_total * &cache.f;
        let mut dgates = Array2::<f64>::zeros((rows, 4 * h));
        dgates
            .slice_mut(s![.., 0..h])
            .assign(&(&d_i * &cache.i.mapv(|v| v * (1.0 - v))));
        dgates
            .slice_mut(s![.., h..2 * h])
            .assign(&(&d_f * &cache.f.mapv(|v| v * (1.0 - v))));
        dgates
            .slice_mut(s![.., 2 * h..3 * h])
            .assign(&(&d_g * &cache.g.mapv(|v| 1.0 - v * v)));
        dgates
            .slice_mut(s![.., 3 * h..4 * h])
            .assign(&(&d_o * &cache.o.mapv(|v| v * (1.0 - v))));
        self.linear
            .accumulate(cache.z.view(), dgates.view(), &mut grad.linear);
        (self.linear.input_grad(dgates.view()), dc_prev)
    }
}

impl Parameters for LstmCell {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.linear.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.linear.collect_mut(prefix, out);
    }
}

/// Single-layer GRU (gate order `r z n`), processing one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
}

struct GruStep {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    r: Array1<f64>,
    z: Array1<f64>,
    n: Array1<f64>,
    hn: Array1<f64>,
}

pub struct GruCache {
    steps: Vec<GruStep>,
}

impl Gru {
    pub fn glorot<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Gru {
            input: Linear::glorot(input, 3 * hidden, input, 3 * hidden, rng),
            hidden: Linear::glorot(hidden, 3 * hidden, hidden, 3 * hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Gru {
            input: Linear::zeros(input, 3 * hidden),
            hidden: Linear::zeros(hidden, 3 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn input_size(&self) -> usize {
        self.input.inputs()
    }

    /// Runs over the rows of `xs` from a zero state; returns the last state.
    pub fn forward(&self, xs: ArrayView2<f64>) -> (Array1<f64>, GruCache) {
        let hs = self.hidden_size();
        let mut h = Array1::<f64>::zeros(hs);
        let mut steps = Vec::with_capacity(xs.nrows());
        for x in xs.rows() {
            let gx = self.input.forward_vec(x);
            let gh = self.hidden.forward_vec(h.view());
            let r = (&gx.slice(s![0..hs]) + &gh.slice(s![0..hs])).mapv(sigmoid);
            let z = (&gx.slice(s![hs..2 * hs]) + &gh.slice(s![hs..2 * hs])).mapv(sigmoid);
            let hn = gh.slice(s![2 * hs..3 * hs]).to_owned();
            let n = (&gx.slice(s![2 * hs..3 * hs]) + &(&r * &hn)).mapv(f64::tanh);
            let h_next = &(z.mapv(|v| 1.0 - v) * &n) + &(&z * &h);
            steps.push(GruStep {
                x: x.to_owned(),
                h_prev: h,
                r,
                z,
                n,
                hn,
            });
            h = h_next;
        }
        (h, GruCache { steps })
    }

    /// Backpropagates `dL/dh_last`; only parameter gradients are produced.
    pub fn backward(&self, cache: &GruCache, dh_last: ArrayView1<f64>, grad: &mut Gru) {
        let hs = self.hidden_size();
        let mut dh = dh_last.to_owned();
        for st in cache.steps.iter().rev() {
            let dn = &dh * &st.z.mapv(|v| 1.0 - v);
            let dz = &dh * &(&st.h_prev - &st.n);
            let mut dh_prev = &dh * &st.z;
            let dn_pre = &dn * &st.n.mapv(|v| 1.0 - v * v);
            let dr = &dn_pre * &st.hn;
            let dz_pre = &dz * &st.z.mapv(|v| v * (1.0 - v));
            let dr_pre = &dr * &st.r.mapv(|v| v * (1.0 - v));
            let mut dgx = Array1::<f64>::zeros(3 * hs);
            dgx.slice_mut(s![0..hs]).assign(&dr_pre);
            dgx.slice_mut(s![hs..2 * hs]).assign(&dz_pre);
            dgx.slice_mut(s![2 * hs..3 * hs]).assign(&dn_pre);
            let mut dgh = dgx.clone();
            dgh.slice_mut(s![2 * hs..3 * hs]).assign(&(&dn_pre * &st.r));
            let x2 = st.x.view().insert_axis(Axis(0));
            let h2 = st.h_prev.view().insert_axis(Axis(0));
            self.input
                .accumulate(x2, dgx.view().insert_axis(Axis(0)), &mut grad.input);
            self.hidden
                .accumulate(h2, dgh.view().insert_axis(Axis(0)), &mut grad.hidden);
            dh_prev += &self.hidden.weight.dot(&dgh);
            dh = dh_prev;
        }
    }
}

impl Parameters for Gru {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.input.collect(&join(prefix, "input"), out);
        self.hidden.collect(&join(prefix, "hidden"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.input.collect_mut(&join(prefix, "input"), out);
        self.hidden.collect_mut(&join(prefix, "hidden"), out);
    }
}

/// Softmax restricted to cells where `mask` is true; masked cells get exactly
/// zero. Fails when no cell is valid or a valid logit is not finite.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(MarnError::Data("attention has no valid cell".into()));
    }
    if let Some((l, _)) = logits.iter().zip(mask).find(|(l, &m)| m && !l.is_finite()) {
        return Err(MarnError::Numeric(format!("attention logit is {l}")));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Backward of a (masked) softmax: `dlogit = p * (dp - <p, dp>)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

/// Numerically stable `log_softmax`.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|l| l - lse)
}
