//! The 2D proposal grid and its precomputed linear-interpolation sampling map.
//!
//! A proposal is addressed by `(start, scale index)`. Each valid proposal is
//! summarized by `N` evenly spaced sample points over the units it covers;
//! every sample point reads from at most two adjacent feature rows.

use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{MarnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrideRule {
    /// Every start index.
    #[default]
    Dense,
    /// Starts restricted to multiples of `max(1, floor(scale / 4))`.
    SparseQuarter,
}

impl StrideRule {
    pub fn stride(self, scale: usize) -> usize {
        match self {
            StrideRule::Dense => 1,
            StrideRule::SparseQuarter => (scale / 4).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrid {
    t: usize,
    scales: Vec<usize>,
    n_samples: usize,
    stride_rule: StrideRule,
    valid: Array2<bool>,
}

impl ProposalGrid {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn stride_rule(&self) -> StrideRule {
        self.stride_rule
    }

    /// `T x S` validity mask.
    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn is_valid(&self, start: usize, scale_idx: usize) -> bool {
        start < self.t && scale_idx < self.scales.len() && self.valid[[start, scale_idx]]
    }

    pub fn n_cells(&self) -> usize {
        self.t * self.scales.len()
    }

    /// Flat cell index `start * S + scale_idx`.
    pub fn cell(&self, start: usize, scale_idx: usize) -> usize {
        start * self.scales.len() + scale_idx
    }

    /// Valid `(start, scale_idx)` pairs in row-major order.
    pub fn valid_cells(&self) -> Vec<(usize, usize)> {
        self.valid
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|(ij, _)| ij)
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Seconds covered by proposal `(start, scale_idx)`.
    pub fn interval(&self, start: usize, scale_idx: usize, unit_seconds: f64) -> Result<(f64, f64)> {
        proposal_interval(start, scale_idx, self, unit_seconds)
    }
}

pub fn enumerate_proposals(
    t: usize,
    scales: &[usize],
    stride_rule: StrideRule,
    n_samples: usize,
) -> Result<ProposalGrid> {
    if scales.is_empty() {
        return Err(MarnError::Config("proposal scales must not be empty".into()));
    }
    if n_samples < 2 {
        return Err(MarnError::Config(format!(
            "need at least 2 sample points per proposal, got {n_samples}"
        )));
    }
    if scales[0] < 1 || scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MarnError::Config(format!(
            "scales must be strictly increasing and >= 1: {scales:?}"
        )));
    }
    let max_scale = *scales.last().unwrap();
    if t < max_scale {
        return Err(MarnError::Config(format!(
            "T = {t} is shorter than the largest scale {max_scale}"
        )));
    }
    let valid = Array2::from_shape_fn((t, scales.len()), |(i, j)| {
        let s = scales[j];
        i + s <= t && i % stride_rule.stride(s) == 0
    });
    Ok(ProposalGrid {
        t,
        scales: scales.to_vec(),
        n_samples,
        stride_rule,
        valid,
    })
}

/// `t_n = start + n (scale - 1) / (N - 1)`, inclusive of both covered ends.
pub fn sampling_points(start: usize, scale: usize, n_samples: usize) -> Vec<f64> {
    let step = (scale as f64 - 1.0) / (n_samples as f64 - 1.0);
    (0..n_samples)
        .map(|n| start as f64 + n as f64 * step)
        .collect()
}

/// Two interpolation taps `(row, weight)`; the weights sum to one.
pub type Taps = [(usize, f64); 2];

fn taps_for(point: f64, t: usize) -> Taps {
    let lo = point.floor() as usize;
    let frac = point - lo as f64;
    if lo + 1 >= t {
        [(lo.min(t - 1), 1.0), (lo.min(t - 1), 0.0)]
    } else {
        [(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Data-independent interpolation weights for every `(start, scale, n)`.
#[derive(Debug, Clone)]
pub struct SamplingMap {
    grid: ProposalGrid,
    /// Valid cells (row-major) as `(start, scale_idx)`.
    cells: Vec<(usize, usize)>,
    /// `cells.len() * N` tap pairs.
    taps: Vec<Taps>,
}

impl SamplingMap {
    pub fn grid(&self) -> &ProposalGrid {
        &self.grid
    }

    pub fn valid_cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    /// Taps for the `k`-th valid cell, one pair per sample point.
    pub fn cell_taps(&self, k: usize) -> &[Taps] {
        let n = self.grid.n_samples;
        &self.taps[k * n..(k + 1) * n]
    }

    /// Logical shape `[T, S, N, T]`.
    pub fn shape(&self) -> [usize; 4] {
        [
            self.grid.t,
            self.grid.n_scales(),
            self.grid.n_samples,
            self.grid.t,
        ]
    }

    /// Materializes the full weight tensor `W[i, j, n, t]`.
    pub fn dense(&self) -> Array4<f64> {
        let mut w = Array4::<f64>::zeros(self.shape());
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            for (n, taps) in self.cell_taps(k).iter().enumerate() {
                for &(t, wt) in taps {
                    w[[i, j, n, t]] += wt;
                }
            }
        }
        w
    }

    /// Samples the valid cells only: `valid_count x (N * d)`, sample points
    /// laid out consecutively within a row.
    pub fn sample_valid(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(features.nrows())?;
        let d = features.ncols();
        let n = self.grid.n_samples;
        let mut out = Array2::<f64>::zeros((self.cells.len(), n * d));
        for (k, mut row) in out.rows_mut().into_iter().enumerate() {
            for (s, taps) in self.cell_taps(k).iter().enumerate() {
                let mut dst = row.slice_mut(ndarray::s![s * d..(s + 1) * d]);
                for &(t, wt) in taps {
                    if wt != 0.0 {
                        dst.scaled_add(wt, &features.row(t));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`sample_valid`](Self::sample_valid): scatters gradients of
    /// the sampled rows back onto `T x d` feature rows.
    pub fn scatter_valid(&self, grad: ArrayView2<f64>, d: usize) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.grid.t, d));
        for (k, row) in grad.rows().into_iter().enumerate() {
            for (s, taps) in self.cell_taps(k).iter().enumerate() {
                let src = row.slice(ndarray::s![s * d..(s + 1) * d]);
                for &(t, wt) in taps {
                    if wt != 0.0 {
                        out.row_mut(t).scaled_add(wt, &src);
                    }
                }
            }
        }
        out
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.grid.t {
            return Err(MarnError::Shape(format!(
                "sampling map expects {} feature rows, got {rows}",
                self.grid.t
            )));
        }
        Ok(())
    }
}

pub fn build_sampling_map(grid: &ProposalGrid) -> SamplingMap {
    let cells = grid.valid_cells();
    let mut taps = Vec::with_capacity(cells.len() * grid.n_samples);
    for &(i, j) in &cells {
        for p in sampling_points(i, grid.scales[j], grid.n_samples) {
            taps.push(taps_for(p, grid.t));
        }
    }
    SamplingMap {
        grid: grid.clone(),
        cells,
        taps,
    }
}

/// Sampled proposal features, `T x S x N x d`, zero at invalid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledProposalTensor {
    pub data: Array4<f64>,
}

pub fn apply_sampling(map: &SamplingMap, features: ArrayView2<f64>) -> Result<SampledProposalTensor> {
    let rows = map.sample_valid(features)?;
    let [t, s, n, _] = map.shape();
    let d = features.ncols();
    let mut data = Array4::<f64>::zeros((t, s, n, d));
    for (k, &(i, j)) in map.valid_cells().iter().enumerate() {
        for p in 0..n {
            data.slice_mut(ndarray::s![i, j, p, ..])
                .assign(&rows.slice(ndarray::s![k, p * d..(p + 1) * d]));
        }
    }
    Ok(SampledProposalTensor { data })
}

pub fn proposal_interval(
    start: usize,
    scale_idx: usize,
    grid: &ProposalGrid,
    unit_seconds: f64,
) -> Result<(f64, f64)> {
    if !grid.is_valid(start, scale_idx) {
        return Err(MarnError::Data(format!(
            "proposal (start {start}, scale index {scale_idx}) is not a valid grid cell"
        )));
    }
    let s = grid.scales[scale_idx];
    Ok((
        start as f64 * unit_seconds,
        (start + s) as f64 * unit_seconds,
    ))
}

/// Six scales evenly spanning 6..=12 units on a 32-unit timeline.
pub const CHARADES_SCALES: [usize; 6] = [6, 7, 8, 10, 11, 12];

pub fn activitynet_scales() -> Vec<usize> {
    (1..=64).collect()
}
