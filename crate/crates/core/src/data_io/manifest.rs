//! JSON-lines dataset manifests.
//!
//! One object per line: `{"video_id", "feature_path", "sentence", "gt"?}` where
//! `gt` is `[t_s, t_e]` in seconds. Relative feature paths resolve against
//! the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MarnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: String,
    pub sentence: String,
    #[serde(default, rename = "gt", skip_serializing_if = "Option::is_none")]
    pub gt_interval: Option<(f64, f64)>,
}

impl ManifestEntry {
    /// Stable identifier of the query described by entry `index`.
    pub fn query_id(&self, index: usize) -> String {
        format!("{}#{index}", self.video_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory used to resolve relative `feature_path`s.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.feature_path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// The weakly supervised view: same entries, interval annotations removed.
    pub fn without_intervals(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    gt_interval: None,
                    ..e.clone()
                })
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Fails naming the first entry that lacks an interval annotation.
    pub fn require_intervals(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.gt_interval.is_none() {
                return Err(MarnError::Data(format!(
                    "entry {i} ({}) has no gt interval; evaluation needs one",
                    e.video_id
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| MarnError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: e.to_string(),
            })?;
        if let Some((ts, te)) = entry.gt_interval {
            if !(ts.is_finite() && te.is_finite() && ts >= 0.0 && ts < te) {
                return Err(MarnError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("gt interval ({ts}, {te}) must satisfy 0 <= t_s < t_e"),
                });
            }
        }
        entries.push(entry);
    }
    Ok(DatasetManifest {
        entries,
        base_dir: path.parent().map(Path::to_path_buf),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| MarnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_manifest() {
        let text = r#"{"video_id":"a","feature_path":"a.feat","sentence":"person opens door","gt":[2.0,6.5]}
{"video_id":"b","feature_path":"/abs/b.feat","sentence":"a man sits"}
"#;
        let m = parse_manifest(text, Path::new("/data/train.jsonl")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].gt_interval, Some((2.0, 6.5)));
        assert_eq!(m.entries[1].gt_interval, None);
        assert_eq!(m.feature_path(&m.entries[0]), PathBuf::from("/data/a.feat"));
        assert_eq!(m.feature_path(&m.entries[1]), PathBuf::from("/abs/b.feat"));
    }

    #[test]
    fn missing_sentence_reports_line() {
        let text = "{\"video_id\":\"a\",\"feature_path\":\"a.feat\",\"sentence\":\"x\"}\n{\"video_id\":\"b\",\"feature_path\":\"b.feat\"}\n";
        match parse_manifest(text, Path::new("m.jsonl")) {
            Err(MarnError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let text = r#"{"video_id":"a","feature_path":"a","sentence":"x","gt":[5.0,1.0]}"#;
        assert!(parse_manifest(text, Path::new("m")).is_err());
    }

    #[test]
    fn weak_view_drops_intervals() {
        let text = r#"{"video_id":"a","feature_path":"a","sentence":"x","gt":[1.0,2.0]}"#;
        let m = parse_manifest(text, Path::new("m")).unwrap();
        assert!(m.require_intervals().is_ok());
        let weak = m.without_intervals();
        assert!(weak.entries.iter().all(|e| e.gt_interval.is_none()));
        assert!(weak.require_intervals().is_err());
    }
}
