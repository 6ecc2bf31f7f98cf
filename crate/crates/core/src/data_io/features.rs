//! Binary feature files and temporal resampling.
//!
//! Layout (little-endian): magic `MARNFEAT`, `u32` version (1), `u32`
//! n_units, `u32` dim, `f32` unit_seconds, then `n_units * dim` `f32`
//! values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{MarnError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"MARNFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4;

/// Per-unit visual features exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideoFeatures {
    pub video_id: String,
    pub data: Array2<f32>,
    pub unit_seconds: f32,
}

impl RawVideoFeatures {
    pub fn n_units(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Features resampled to the model's temporal length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// `T x d_v`.
    pub data: Array2<f64>,
    pub unit_seconds: f64,
}

impl VideoFeatures {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn video_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes a feature file held in memory. `path` is only used for messages.
pub fn decode_feature_bytes(bytes: &[u8], path: &Path) -> Result<RawVideoFeatures> {
    if bytes.len() < HEADER_LEN {
        return Err(MarnError::format(path, "file shorter than header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(MarnError::format(path, "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != FEATURE_VERSION {
        return Err(MarnError::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let n_units = word(12) as usize;
    let dim = word(16) as usize;
    let unit_seconds = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    if n_units == 0 || dim == 0 {
        return Err(MarnError::format(
            path,
            format!("degenerate shape {n_units}x{dim}"),
        ));
    }
    if !unit_seconds.is_finite() || unit_seconds <= 0.0 {
        return Err(MarnError::format(
            path,
            format!("unit_seconds must be positive and finite, got {unit_seconds}"),
        ));
    }
    let expected = n_units
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| MarnError::format(path, "shape overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(MarnError::format(
            path,
            format!(
                "header declares {n_units}x{dim} ({} values) but payload holds {} bytes",
                n_units * dim,
                payload.len()
            ),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(MarnError::format(
            path,
            format!("non-finite value at row {} col {}", pos / dim, pos % dim),
        ));
    }
    let data = Array2::from_shape_vec((n_units, dim), values)
        .map_err(|e| MarnError::format(path, e.to_string()))?;
    Ok(RawVideoFeatures {
        video_id: video_id_from_path(path),
        data,
        unit_seconds,
    })
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<RawVideoFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MarnError::io(path, e))?;
    decode_feature_bytes(&bytes, path)
}

pub fn encode_feature_bytes(raw: &RawVideoFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + raw.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(raw.n_units() as u32).to_le_bytes());
    out.extend_from_slice(&(raw.dim() as u32).to_le_bytes());
    out.extend_from_slice(&raw.unit_seconds.to_le_bytes());
    for v in raw.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_feature_file(path: impl AsRef<Path>, raw: &RawVideoFeatures) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    file.write_all(&encode_feature_bytes(raw))
        .map_err(|e| MarnError::io(path, e))
}

/// Resamples raw units onto `t` model units.
///
/// When `t <= n_units` the raw rows are split into `t` contiguous bins whose
/// sizes differ by at most one and each bin is mean-pooled. When `t > n_units`
/// rows are linearly interpolated at evenly spaced fractional positions with
/// both endpoints aligned.
pub fn resample_features(raw: &RawVideoFeatures, t: usize) -> Result<VideoFeatures> {
    let n = raw.n_units();
    if n == 0 || t == 0 {
        return Err(MarnError::Data(format!(
            "cannot resample {n} units to {t} units"
        )));
    }
    let dim = raw.dim();
    let src = raw.data.mapv(f64::from);
    let mut data = Array2::<f64>::zeros((t, dim));
    if t <= n {
        for (j, mut row) in data.rows_mut().into_iter().enumerate() {
            let lo = j * n / t;
            let hi = (j + 1) * n / t;
            for r in lo..hi {
                row += &src.row(r);
            }
            row /= (hi - lo) as f64;
        }
    } else {
        for (j, mut row) in data.rows_mut().into_iter().enumerate() {
            let pos = j as f64 * (n - 1) as f64 / (t - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let hi = (lo + 1).min(n - 1);
            lerp_into(&mut row, src.row(lo), src.row(hi), frac);
        }
    }
    Ok(VideoFeatures {
        video_id: raw.video_id.clone(),
        data,
        unit_seconds: n as f64 * f64::from(raw.unit_seconds) / t as f64,
    })
}

fn lerp_into(
    out: &mut ndarray::ArrayViewMut1<f64>,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    frac: f64,
) {
    for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = (1.0 - frac) * x + frac * y;
    }
}
