//! Score ensembling, proposal ranking and the grounding metrics.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{MarnError, Result};
use crate::model::AttentionMap;
use crate::proposal::ProposalGrid;

/// Recall cut-offs reported by default.
pub const DEFAULT_RECALL_N: [usize; 2] = [1, 5];
pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Clip at the centre of proposal `(start, scale)`, rounded down and clamped.
pub fn center_clip(start: usize, scale: usize, t: usize) -> usize {
    // floor(start + scale / 2) without going through floats
    (start + scale / 2).min(t.saturating_sub(1))
}

/// Adds `epsilon` times the centre clip's score to every valid proposal
/// score. Invalid cells come back as `-inf`; with no clip map (or
/// `epsilon == 0`) the valid scores equal `proposal` exactly.
pub fn ensemble_scores(
    proposal: &AttentionMap,
    clip: Option<&AttentionMap>,
    epsilon: f64,
    grid: &ProposalGrid,
) -> Result<Array2<f64>> {
    let (t, s_count) = (grid.t(), grid.n_scales());
    if proposal.scores.dim() != (t, s_count) {
        return Err(MarnError::Shape(format!(
            "proposal attention is {:?}, grid is {t}x{s_count}",
            proposal.scores.dim()
        )));
    }
    if let Some(c) = clip {
        if c.scores.nrows() != t {
            return Err(MarnError::Shape(format!(
                "clip attention covers {} units, grid has {t}",
                c.scores.nrows()
            )));
        }
    }
    let mut out = Array2::from_elem((t, s_count), f64::NEG_INFINITY);
    for (i, j) in grid.valid_cells() {
        let mut score = proposal.scores[[i, j]];
        if let Some(c) = clip {
            if epsilon != 0.0 {
                score += epsilon * c.scores[[center_clip(i, grid.scales()[j], t), 0]];
            }
        }
        out[[i, j]] = score;
    }
    Ok(out)
}

/// Ranked intervals for one query, in seconds. Serialised as
/// `{"query_id": .., "ranked": [[t_s, t_e, score], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub query_id: String,
    pub ranked: Vec<(f64, f64, f64)>,
}

impl GroundingResult {
    pub fn top(&self) -> Option<(f64, f64)> {
        self.ranked.first().map(|&(s, e, _)| (s, e))
    }
}

/// Sorts valid cells by score (descending; ties go to the earlier start,
/// then the smaller scale) and keeps the first `top_n`.
pub fn rank_proposals(
    query_id: &str,
    scores: &Array2<f64>,
    grid: &ProposalGrid,
    unit_seconds: f64,
    top_n: usize,
) -> Result<GroundingResult> {
    if scores.dim() != (grid.t(), grid.n_scales()) {
        return Err(MarnError::Shape("score map does not match the grid".into()));
    }
    let mut cells: Vec<(usize, usize, f64)> = grid
        .valid_cells()
        .into_iter()
        .map(|(i, j)| (i, j, scores[[i, j]]))
        .collect();
    if cells.is_empty() {
        return Err(MarnError::Data("grid has no valid proposals".into()));
    }
    if let Some(&(i, j, _)) = cells.iter().find(|c| c.2.is_nan()) {
        return Err(MarnError::Numeric(format!(
            "query {query_id}: score of proposal ({i}, scale {}) is NaN",
            grid.scales()[j]
        )));
    }
    // the scale list is ascending, so the scale index orders like the scale
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut ranked = Vec::with_capacity(top_n.min(cells.len()));
    for &(i, j, score) in cells.iter().take(top_n) {
        let (ts, te) = grid.interval(i, j, unit_seconds)?;
        ranked.push((ts, te, score));
    }
    Ok(GroundingResult {
        query_id: query_id.to_string(),
        ranked,
    })
}

/// Greedy suppression of lower-ranked intervals overlapping a kept one by
/// at least `threshold`. Not used by the default evaluation.
pub fn suppress_overlaps(result: &GroundingResult, threshold: f64) -> Result<GroundingResult> {
    let mut kept: Vec<(f64, f64, f64)> = Vec::new();
    for &cand in &result.ranked {
        let mut keep = true;
        for k in &kept {
            if temporal_iou((cand.0, cand.1), (k.0, k.1))? >= threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(cand);
        }
    }
    Ok(GroundingResult {
        query_id: result.query_id.clone(),
        ranked: kept,
    })
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for iv in [a, b] {
        if !(iv.1 > iv.0) {
            return Err(MarnError::Data(format!(
                "interval ({}, {}) has non-positive length",
                iv.0, iv.1
            )));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union)
}

fn gt_for<'a>(gt: &'a HashMap<String, (f64, f64)>, query_id: &str) -> Result<&'a (f64, f64)> {
    gt.get(query_id)
        .ok_or_else(|| MarnError::Data(format!("no ground-truth interval for query {query_id}")))
}

/// Fraction of queries with at least one of their top `n` intervals at
/// IoU >= `theta` (inclusive).
pub fn recall_at_n(
    results: &[GroundingResult],
    gt: &HashMap<String, (f64, f64)>,
    n: usize,
    theta: f64,
) -> Result<f64> {
    if results.is_empty() {
        return Err(MarnError::Data("no results to evaluate".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let g = *gt_for(gt, &r.query_id)?;
        for &(s, e, _) in r.ranked.iter().take(n) {
            if temporal_iou((s, e), g)? >= theta {
                hits += 1;
                break;
            }
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Mean IoU of each query's top-1 interval; an empty ranking counts as 0.
pub fn mean_iou(results: &[GroundingResult], gt: &HashMap<String, (f64, f64)>) -> Result<f64> {
    if results.is_empty() {
        return Err(MarnError::Data("no results to evaluate".into()));
    }
    let mut total = 0.0;
    for r in results {
        let g = *gt_for(gt, &r.query_id)?;
        if let Some(top) = r.top() {
            total += temporal_iou(top, g)?;
        }
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub theta: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recalls: Vec<RecallEntry>,
    pub miou: f64,
    pub n_queries: usize,
}

pub fn recall_key(n: usize, theta: f64) -> String {
    format!("R@{n}_IoU={theta}")
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl MetricReport {
    pub fn recall(&self, n: usize, theta: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|r| r.n == n && r.theta == theta)
            .map(|r| r.value)
    }

    /// `{"R@1_IoU=0.5": .., "mIoU": ..}` with values rounded to 4 decimals.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for r in &self.recalls {
            map.insert(recall_key(r.n, r.theta), Value::from(round4(r.value)));
        }
        map.insert("mIoU".into(), Value::from(round4(self.miou)));
        Value::Object(map)
    }

    /// Recall can only grow with `n` and shrink with `theta`.
    pub fn check_monotone(&self) -> Result<()> {
        for a in &self.recalls {
            for b in &self.recalls {
                let should_be_ge =
                    (a.n >= b.n && a.theta <= b.theta) && !(a.n == b.n && a.theta == b.theta);
                if should_be_ge && a.value < b.value {
                    return Err(MarnError::Numeric(format!(
                        "{} = {} is below {} = {}",
                        recall_key(a.n, a.theta),
                        a.value,
                        recall_key(b.n, b.theta),
                        b.value
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Every requested `(n, theta)` recall plus mIoU.
pub fn compute_metrics(
    results: &[GroundingResult],
    gt: &HashMap<String, (f64, f64)>,
    recall_n: &[usize],
    thresholds: &[f64],
) -> Result<MetricReport> {
    let mut recalls = Vec::with_capacity(recall_n.len() * thresholds.len());
    for &n in recall_n {
        for &theta in thresholds {
            recalls.push(RecallEntry {
                n,
                theta,
                value: recall_at_n(results, gt, n, theta)?,
            });
        }
    }
    let report = MetricReport {
        recalls,
        miou: mean_iou(results, gt)?,
        n_queries: results.len(),
    };
    report.check_monotone()?;
    Ok(report)
}

pub fn write_predictions(path: impl AsRef<Path>, results: &[GroundingResult]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let line = serde_json::to_string(r).expect("results serialise");
        writeln!(w, "{line}").map_err(|e| MarnError::io(path, e))?;
    }
    w.flush().map_err(|e| MarnError::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<GroundingResult>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MarnError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
