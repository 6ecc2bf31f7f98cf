//! Dataset loading and the single-query inference pipeline shared by
//! training, evaluation, grounding and attention export.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data_io::{
    encode_query, load_feature_file, resample_features, DatasetManifest, QueryTokens,
    VideoFeatures, Vocabulary,
};
use crate::error::{MarnError, Result};
use crate::inference::{
    compute_metrics, ensemble_scores, rank_proposals, suppress_overlaps, GroundingResult,
    MetricReport,
};
use crate::model::{ForwardOutput, Marn};

#[derive(Debug, Clone)]
pub struct Sample {
    pub query_id: String,
    /// Index into [`Dataset::videos`].
    pub video: usize,
    pub query: QueryTokens,
    pub gt: Option<(f64, f64)>,
}

/// Resampled videos (one per distinct feature file) and encoded queries.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoFeatures>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_of(&self, sample: &Sample) -> &VideoFeatures {
        &self.videos[sample.video]
    }

    pub fn ground_truth(&self) -> HashMap<String, (f64, f64)> {
        self.samples
            .iter()
            .filter_map(|s| s.gt.map(|g| (s.query_id.clone(), g)))
            .collect()
    }
}

pub fn load_video(path: impl AsRef<Path>, t: usize, d_v: usize) -> Result<VideoFeatures> {
    let path = path.as_ref();
    let raw = load_feature_file(path)?;
    if raw.dim() != d_v {
        return Err(MarnError::Shape(format!(
            "{} has {}-dim features, the model expects {d_v}",
            path.display(),
            raw.dim()
        )));
    }
    resample_features(&raw, t)
}

/// Loads every referenced feature file once (in parallel) and encodes every
/// sentence.
pub fn load_dataset(
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    t: usize,
    d_v: usize,
    max_query_len: usize,
) -> Result<Dataset> {
    if manifest.is_empty() {
        return Err(MarnError::Data("manifest has no entries".into()));
    }
    let mut paths: Vec<PathBuf> = Vec::new();
    let mut by_path: HashMap<PathBuf, usize> = HashMap::new();
    let mut video_index = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let path = manifest.feature_path(entry);
        let idx = *by_path.entry(path.clone()).or_insert_with(|| {
            paths.push(path);
            paths.len() - 1
        });
        video_index.push(idx);
    }
    let videos = paths
        .par_iter()
        .map(|p| load_video(p, t, d_v))
        .collect::<Result<Vec<_>>>()?;
    let samples = manifest
        .entries
        .iter()
        .zip(video_index)
        .enumerate()
        .map(|(i, (entry, video))| {
            Ok(Sample {
                query_id: entry.query_id(i),
                video,
                query: encode_query(&entry.sentence, vocab, max_query_len)?,
                gt: entry.gt_interval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { videos, samples })
}

/// A trained model with its vocabulary, ready for inference.
#[derive(Debug, Clone)]
pub struct Grounder {
    pub marn: Marn,
    pub vocabulary: Vocabulary,
}

impl Grounder {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Ok(Grounder {
            marn: Marn::from_params(ckpt.config, ckpt.params)?,
            vocabulary: ckpt.vocabulary,
        })
    }

    /// Encodes a sentence; a sentence with no known word still runs but is
    /// reported.
    pub fn encode(&self, sentence: &str) -> Result<QueryTokens> {
        let q = encode_query(sentence, &self.vocabulary, self.marn.config.max_query_len)?;
        if q.unknown_count() == q.len - 1 {
            log::warn!("no word of {sentence:?} is in the vocabulary; grounding an all-<unk> query");
        }
        Ok(q)
    }

    pub fn load_video(&self, path: impl AsRef<Path>) -> Result<VideoFeatures> {
        load_video(path, self.marn.config.t, self.marn.config.d_v)
    }

    pub fn ground_tokens(
        &self,
        query_id: &str,
        video: &VideoFeatures,
        query: &QueryTokens,
        top_n: usize,
    ) -> Result<GroundingResult> {
        rank_output(&self.marn, query_id, video, &self.marn.forward(video, query)?, top_n)
    }

    pub fn ground(
        &self,
        query_id: &str,
        video: &VideoFeatures,
        sentence: &str,
        top_n: usize,
    ) -> Result<GroundingResult> {
        self.ground_tokens(query_id, video, &self.encode(sentence)?, top_n)
    }

    /// Writes the proposal attention (`T` rows, one column per scale) to
    /// `out_path` and, when the model has a clip branch, the clip attention
    /// to `<stem>.clip.csv` next to it. Returns the written paths.
    pub fn export_attention(
        &self,
        video: &VideoFeatures,
        sentence: &str,
        out_path: impl AsRef<Path>,
    ) -> Result<Vec<PathBuf>> {
        let out_path = out_path.as_ref();
        let out = self.marn.forward(video, &self.encode(sentence)?)?;
        let scales: Vec<String> = self.marn.grid().scales().iter().map(|s| s.to_string()).collect();
        let mut written = vec![out_path.to_path_buf()];
        write_csv(out_path, &scales, &out.proposal.attention.scores)?;
        if let Some(clip) = &out.clip {
            let stem = out_path.file_stem().and_then(|s| s.to_str()).unwrap_or("attention");
            let clip_path = out_path.with_file_name(format!("{stem}.clip.csv"));
            write_csv(&clip_path, &["1".to_string()], &clip.attention.scores)?;
            written.push(clip_path);
        }
        Ok(written)
    }
}

fn write_csv(path: &Path, scales: &[String], values: &ndarray::Array2<f64>) -> Result<()> {
    let mut text = format!("start,{}\n", scales.join(","));
    for (i, row) in values.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&format!("{i},{}\n", cells.join(",")));
    }
    let mut f = fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| MarnError::io(path, e))
}

/// Ensembles the branch attentions (clip branch only when the model infers
/// with it) and ranks the proposals.
pub fn rank_output(
    marn: &Marn,
    query_id: &str,
    video: &VideoFeatures,
    out: &ForwardOutput,
    top_n: usize,
) -> Result<GroundingResult> {
    let clip = out
        .clip
        .as_ref()
        .filter(|_| marn.config.multilevel_infer)
        .map(|c| &c.attention);
    let scores = ensemble_scores(&out.proposal.attention, clip, marn.config.epsilon, marn.grid())?;
    rank_proposals(query_id, &scores, marn.grid(), video.unit_seconds, top_n)
}

/// Ranks every sample (in parallel, results in dataset order) and computes
/// the metrics against the samples' ground truth.
pub fn evaluate_dataset(
    marn: &Marn,
    dataset: &Dataset,
    recall_n: &[usize],
    thresholds: &[f64],
) -> Result<(MetricReport, Vec<GroundingResult>)> {
    evaluate_dataset_with(marn, dataset, recall_n, thresholds, None)
}

/// As [`evaluate_dataset`], optionally suppressing overlapping intervals
/// (IoU >= `nms`) before truncating each ranking.
pub fn evaluate_dataset_with(
    marn: &Marn,
    dataset: &Dataset,
    recall_n: &[usize],
    thresholds: &[f64],
    nms: Option<f64>,
) -> Result<(MetricReport, Vec<GroundingResult>)> {
    let top_n = recall_n.iter().copied().max().unwrap_or(1).max(1);
    let results = dataset
        .samples
        .par_iter()
        .map(|s| {
            let video = dataset.video_of(s);
            let out = marn.forward(video, &s.query)?;
            match nms {
                None => rank_output(marn, &s.query_id, video, &out, top_n),
                Some(th) => {
                    let all = rank_output(marn, &s.query_id, video, &out, usize::MAX)?;
                    let mut kept = suppress_overlaps(&all, th)?;
                    kept.ranked.truncate(top_n);
                    Ok(kept)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let gt = dataset.ground_truth();
    if gt.len() != dataset.len() {
        return Err(MarnError::Data(
            "evaluation needs a ground-truth interval for every entry".into(),
        ));
    }
    let report = compute_metrics(&results, &gt, recall_n, thresholds)?;
    Ok((report, results))
}
