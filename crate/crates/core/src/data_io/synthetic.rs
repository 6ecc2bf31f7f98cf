//! Deterministic synthetic grounding datasets.
//!
//! Each video is Gaussian background noise with one planted segment whose
//! rows additionally carry the bag-of-words signature of a three-word
//! sentence: content word `k` adds 1.0 to feature coordinate `k`. The
//! sentence is therefore recoverable from the segment and from nothing
//! else, which is exactly the signal weak supervision has to find.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{write_feature_file, RawVideoFeatures};
use super::manifest::{write_manifest, DatasetManifest, ManifestEntry};
use super::vocab::{write_embedding_table, Vocabulary, RESERVED};
use crate::error::{MarnError, Result};

pub const SENTENCE_WORDS: usize = 3;
pub const BACKGROUND_STD: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d_v: usize,
    /// Number of content words (reserved tokens not included).
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_unit_seconds")]
    pub unit_seconds: f32,
}

fn default_embedding_dim() -> usize {
    16
}

fn default_unit_seconds() -> f32 {
    1.0
}

impl SyntheticSpec {
    pub fn new(n_videos: usize, t: usize, d_v: usize, vocab_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_videos,
            t,
            d_v,
            vocab_size,
            seed,
            embedding_dim: default_embedding_dim(),
            unit_seconds: default_unit_seconds(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(MarnError::Config("synthetic vocab_size must be >= 4".into()));
        }
        if self.d_v < self.vocab_size {
            return Err(MarnError::Config(format!(
                "synthetic d_v ({}) must be >= vocab_size ({})",
                self.d_v, self.vocab_size
            )));
        }
        if self.t < 8 {
            return Err(MarnError::Config("synthetic T must be >= 8".into()));
        }
        if self.embedding_dim == 0 || !(self.unit_seconds > 0.0) {
            return Err(MarnError::Config(
                "synthetic embedding_dim and unit_seconds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The segment planted in one video, in model units `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSegment {
    pub start: usize,
    pub end: usize,
    /// Content-word indices, which double as signature coordinates.
    pub words: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub features: Vec<RawVideoFeatures>,
    pub vocabulary: Vocabulary,
    pub planted: Vec<PlantedSegment>,
}

pub fn synthetic_word(k: usize) -> String {
    format!("w{k:02}")
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let emb_dist = Normal::new(0.0f64, 1.0).expect("valid normal");
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..spec.vocab_size).map(synthetic_word));
    let mut embeddings = Array2::<f64>::zeros((tokens.len(), spec.embedding_dim));
    for mut row in embeddings.rows_mut().into_iter().skip(RESERVED.len()) {
        for v in row.iter_mut() {
            // stored as f32 on disk; keep the in-memory copy identical
            *v = f64::from(emb_dist.sample(&mut rng) as f32);
        }
    }
    let vocabulary = Vocabulary::from_parts(tokens, embeddings)?;

    let noise = Normal::new(0.0f32, BACKGROUND_STD).expect("valid normal");
    let min_len = (spec.t / 8).max(1);
    let max_len = (spec.t / 4).max(min_len);
    let mut entries = Vec::with_capacity(spec.n_videos);
    let mut features = Vec::with_capacity(spec.n_videos);
    let mut planted = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(0..=spec.t - len);
        let words: Vec<usize> = sample(&mut rng, spec.vocab_size, SENTENCE_WORDS).into_vec();
        let mut data = Array2::<f32>::zeros((spec.t, spec.d_v));
        for x in data.iter_mut() {
            *x = noise.sample(&mut rng);
        }
        for t in start..start + len {
            for &k in &words {
                data[[t, k]] += 1.0;
            }
        }
        let video_id = format!("syn{v:05}");
        let sentence = words
            .iter()
            .map(|&k| synthetic_word(k))
            .collect::<Vec<_>>()
            .join(" ");
        let us = f64::from(spec.unit_seconds);
        entries.push(ManifestEntry {
            video_id: video_id.clone(),
            feature_path: format!("features/{video_id}.feat"),
            sentence,
            gt_interval: Some((start as f64 * us, (start + len) as f64 * us)),
        });
        features.push(RawVideoFeatures {
            video_id,
            data,
            unit_seconds: spec.unit_seconds,
        });
        planted.push(PlantedSegment {
            start,
            end: start + len,
            words,
        });
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            entries,
            base_dir: None,
        },
        features,
        vocabulary,
        planted,
    })
}

/// A named contiguous slice of the generated videos.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
}

/// Writes `features/*.feat`, one `<split>.jsonl` per split (consecutive
/// videos in generation order) and `embeddings.txt`. Returns every file
/// written, in a fixed order.
pub fn write_synthetic_dataset(
    dataset: &SyntheticDataset,
    out_dir: impl AsRef<Path>,
    splits: &[SplitSpec],
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let total: usize = splits.iter().map(|s| s.count).sum();
    if total > dataset.manifest.len() {
        return Err(MarnError::Config(format!(
            "splits request {total} videos but only {} were generated",
            dataset.manifest.len()
        )));
    }
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| MarnError::io(&feat_dir, e))?;
    let mut written = Vec::new();
    for (entry, raw) in dataset.manifest.entries.iter().zip(&dataset.features).take(total) {
        let path = out_dir.join(&entry.feature_path);
        write_feature_file(&path, raw)?;
        written.push(path);
    }
    let mut offset = 0;
    for split in splits {
        let part = DatasetManifest {
            entries: dataset.manifest.entries[offset..offset + split.count].to_vec(),
            base_dir: None,
        };
        let path = out_dir.join(format!("{}.jsonl", split.name));
        write_manifest(&path, &part)?;
        written.push(path);
        offset += split.count;
    }
    let emb = out_dir.join("embeddings.txt");
    write_embedding_table(&emb, &dataset.vocabulary)?;
    written.push(emb);
    Ok(written)
}
