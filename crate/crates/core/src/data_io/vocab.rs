//! Word embeddings, vocabulary construction and query encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::manifest::DatasetManifest;
use crate::error::{MarnError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

pub const DEFAULT_MAX_QUERY_LEN: usize = 20;

/// Lowercases, splits on whitespace and strips every non-alphanumeric
/// character. Reserved tokens written verbatim (`<unk>`) survive unchanged.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            if RESERVED.contains(&lower.as_str()) {
                return Some(lower);
            }
            let word: String = lower.chars().filter(|c| c.is_alphanumeric()).collect();
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

/// A word -> vector table in the whitespace-separated text format
/// `word v1 ... v_d`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Loads an embedding table. With `keep` set, only those words are retained,
/// which keeps large pretrained tables cheap to ingest.
pub fn load_embedding_table(
    path: impl AsRef<Path>,
    keep: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| MarnError::io(path, e))?;
    let mut table = EmbeddingTable::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MarnError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let parse_err = |reason: String| MarnError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let values = parts
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if values.is_empty() {
            return Err(parse_err(format!("word {word:?} has no vector")));
        }
        if table.dim == 0 {
            table.dim = values.len();
        } else if values.len() != table.dim {
            return Err(parse_err(format!(
                "vector length {} differs from {}",
                values.len(),
                table.dim
            )));
        }
        if keep.is_some_and(|k| !k.contains(word)) {
            continue;
        }
        table.vectors.insert(word.to_string(), values);
    }
    if table.dim == 0 {
        return Err(MarnError::format(path, "embedding table is empty"));
    }
    Ok(table)
}

pub fn write_embedding_table(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, token) in vocab.tokens.iter().enumerate() {
        if RESERVED.contains(&token.as_str()) {
            continue;
        }
        out.push_str(token);
        for v in vocab.embeddings.row(id) {
            out.push(' ');
            out.push_str(&format!("{}", *v as f32));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| MarnError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub index: HashMap<String, usize>,
    /// `|V| x d_w`.
    pub embeddings: Array2<f64>,
}

impl Vocabulary {
    /// Assembles a vocabulary from a token list whose first four entries are
    /// the reserved tokens in `RESERVED` order.
    pub fn from_parts(tokens: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if tokens.len() != embeddings.nrows() {
            return Err(MarnError::Shape(format!(
                "{} tokens but {} embedding rows",
                tokens.len(),
                embeddings.nrows()
            )));
        }
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(MarnError::Data(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(MarnError::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }
}

/// Every distinct token that appears in the manifest's sentences.
pub fn corpus_words(manifest: &DatasetManifest) -> HashSet<String> {
    manifest
        .entries
        .iter()
        .flat_map(|e| tokenize(&e.sentence))
        .collect()
}

/// Keeps words seen at least `min_count` times that also have a vector in
/// `table`; everything else maps to `<unk>`, whose vector is the mean of the
/// dropped words' vectors (zeros when there are none).
pub fn build_vocabulary(
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    min_count: usize,
) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(MarnError::Config("min_count must be >= 1".into()));
    }
    if manifest.is_empty() {
        return Err(MarnError::Data("cannot build a vocabulary from an empty manifest".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &manifest.entries {
        for w in tokenize(&e.sentence) {
            if !RESERVED.contains(&w.as_str()) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let dim = table.dim;
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut rows: Vec<Array1<f64>> = vec![Array1::zeros(dim); RESERVED.len()];
    let mut unk_sum = Array1::<f64>::zeros(dim);
    let mut n_dropped = 0usize;
    for (word, count) in &counts {
        let Some(vec) = table.get(word) else { continue };
        let v = Array1::from_iter(vec.iter().map(|&x| f64::from(x)));
        if *count >= min_count {
            tokens.push(word.clone());
            rows.push(v);
        } else {
            unk_sum += &v;
            n_dropped += 1;
        }
    }
    if n_dropped > 0 {
        // rounded like every other row, so checkpoints hold it exactly
        rows[UNK_ID] = unk_sum.mapv(|x| f64::from((x / n_dropped as f64) as f32));
    }
    for (id, reserved) in RESERVED.iter().enumerate() {
        if id != UNK_ID {
            if let Some(v) = table.get(reserved) {
                rows[id] = v.iter().map(|&x| f64::from(x)).collect();
            }
        }
    }
    let mut embeddings = Array2::<f64>::zeros((tokens.len(), dim));
    for (mut dst, src) in embeddings.rows_mut().into_iter().zip(rows.iter()) {
        dst.assign(src);
    }
    Vocabulary::from_parts(tokens, embeddings)
}

/// A tokenized query, EOS-terminated and padded to the configured length.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTokens {
    /// Length `max_len`; positions `>= len` hold `<pad>`.
    pub ids: Vec<usize>,
    /// Real tokens plus EOS.
    pub len: usize,
    /// `len x d_w`, the embedding of each real token (EOS included).
    pub embeddings: Array2<f64>,
    /// Decoder input at the first step.
    pub bos_embedding: Array1<f64>,
}

impl QueryTokens {
    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.len]
    }

    /// Number of words (EOS excluded) that fell back to `<unk>`.
    pub fn unknown_count(&self) -> usize {
        self.ids[..self.len - 1]
            .iter()
            .filter(|&&id| id == UNK_ID)
            .count()
    }
}

pub fn encode_query(sentence: &str, vocab: &Vocabulary, max_len: usize) -> Result<QueryTokens> {
    if max_len == 0 {
        return Err(MarnError::Config("max_query_len must be >= 1".into()));
    }
    let words = tokenize(sentence);
    if words.is_empty() {
        return Err(MarnError::Data(format!(
            "sentence {sentence:?} is empty after tokenization"
        )));
    }
    let keep = words.len().min(max_len - 1);
    let mut ids: Vec<usize> = words[..keep].iter().map(|w| vocab.id(w)).collect();
    ids.push(EOS_ID);
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    let d = vocab.embedding_dim();
    let mut embeddings = Array2::<f64>::zeros((len, d));
    for (m, &id) in ids[..len].iter().enumerate() {
        embeddings.row_mut(m).assign(&vocab.embeddings.row(id));
    }
    Ok(QueryTokens {
        ids,
        len,
        embeddings,
        bos_embedding: vocab.embeddings.row(BOS_ID).to_owned(),
    })
}

/// Renders the real words of a query (EOS and padding dropped).
pub fn detokenize(query: &QueryTokens, vocab: &Vocabulary) -> String {
    query.ids[..query.len - 1]
        .iter()
        .map(|&id| vocab.tokens[id].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::manifest::ManifestEntry;

    fn manifest(sentences: &[&str]) -> DatasetManifest {
        DatasetManifest {
            entries: sentences
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestEntry {
                    video_id: format!("v{i}"),
                    feature_path: format!("v{i}.feat"),
                    sentence: s.to_string(),
                    gt_interval: None,
                })
                .collect(),
            base_dir: None,
        }
    }

    fn table(words: &[(&str, f32)]) -> EmbeddingTable {
        EmbeddingTable {
            dim: 2,
            vectors: words
                .iter()
                .map(|(w, v)| (w.to_string(), vec![*v, -*v]))
                .collect(),
        }
    }

    #[test]
    fn tokenizer_lowercases_and_strips() {
        assert_eq!(tokenize("Person opens, the DOOR!"), ["person", "opens", "the", "door"]);
        assert_eq!(tokenize("  -- <unk> x"), ["<unk>", "x"]);
    }

    #[test]
    fn min_count_filters_and_unk_is_mean_of_dropped() {
        let t = table(&[("a", 1.0), ("b", 2.0), ("c", 4.0)]);
        let v = build_vocabulary(&manifest(&["a b", "a c"]), &t, 2).unwrap();
        assert_eq!(v.tokens, ["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
        assert_eq!(v.embeddings.row(UNK_ID).to_vec(), vec![3.0, -3.0]);
        assert_eq!(v.embeddings.row(4).to_vec(), vec![1.0, -1.0]);

        let all = build_vocabulary(&manifest(&["a b", "a c"]), &t, 1).unwrap();
        assert_eq!(all.len(), 7);
        assert!(all.embeddings.row(UNK_ID).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn words_without_vectors_are_unknown() {
        let t = table(&[("a", 1.0)]);
        let v = build_vocabulary(&manifest(&["a zebra"]), &t, 1).unwrap();
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn empty_manifest_and_zero_min_count_fail() {
        let t = table(&[("a", 1.0)]);
        assert!(build_vocabulary(&manifest(&[]), &t, 1).is_err());
        assert!(build_vocabulary(&manifest(&["a"]), &t, 0).is_err());
    }

    #[test]
    fn encode_pads_and_terminates() {
        let t = table(&[("person", 1.0), ("opens", 2.0), ("door", 3.0)]);
        let v = build_vocabulary(&manifest(&["person opens door"]), &t, 1).unwrap();
        let q = encode_query("Person opens door", &v, 8).unwrap();
        let (p, o, d) = (v.id("person"), v.id("opens"), v.id("door"));
        assert_eq!(q.ids, vec![p, o, d, EOS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(q.len, 4);
        assert_eq!(q.embeddings.nrows(), 4);
        assert_eq!(q.embeddings.row(2).to_vec(), vec![3.0, -3.0]);

        let q = encode_query("person eats door", &v, 8).unwrap();
        assert_eq!(q.ids[1], UNK_ID);
        assert_eq!(q.unknown_count(), 1);
    }

    #[test]
    fn encode_truncates_keeping_eos() {
        let t = table(&[("w", 1.0)]);
        let v = build_vocabulary(&manifest(&["w"]), &t, 1).unwrap();
        let q = encode_query("w w w w w w w w w w", &v, 8).unwrap();
        assert_eq!(q.len, 8);
        assert_eq!(q.ids[..7], [4; 7]);
        assert_eq!(q.ids[7], EOS_ID);
    }

    #[test]
    fn empty_sentence_fails() {
        let t = table(&[("w", 1.0)]);
        let v = build_vocabulary(&manifest(&["w"]), &t, 1).unwrap();
        assert!(encode_query(" ... !", &v, 8).is_err());
    }

    #[test]
    fn encode_is_idempotent_on_detokenized_output() {
        let t = table(&[("a", 1.0), ("man", 2.0), ("runs", 3.0)]);
        let v = build_vocabulary(&manifest(&["a man runs"]), &t, 1).unwrap();
        for s in ["A man, quickly runs!", "man man man man man man man man man a", "zzz"] {
            let q = encode_query(s, &v, 6).unwrap();
            let again = encode_query(&detokenize(&q, &v), &v, 6).unwrap();
            assert_eq!(q, again, "{s}");
        }
    }
}
