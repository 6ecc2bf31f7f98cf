//! Single-file model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MARNCKPT"  u32 version=1  u32 header_len  header_len bytes of JSON
//! u32 n_tensors
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims,
//!             prod(dims) x f32 values, row-major
//! ```
//!
//! The JSON header holds the model configuration and the vocabulary tokens.
//! Tensors follow the parameter enumeration of [`ModelParams`], then one
//! extra tensor `vocabulary.embeddings`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_io::Vocabulary;
use crate::error::{MarnError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MARNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const VOCAB_TENSOR: &str = "vocabulary.embeddings";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocabulary: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len());
    for &d in shape {
        put_u32(buf, d);
    }
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams, vocab: &Vocabulary) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: config.clone(),
        vocabulary: vocab.tokens.clone(),
    })
    .expect("config serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_u32(&mut buf, header.len());
    buf.extend_from_slice(&header);
    let tensors = params.tensors();
    put_u32(&mut buf, tensors.len() + 1);
    for t in &tensors {
        put_tensor(&mut buf, &t.name, &t.shape, t.data);
    }
    let emb = vocab.embeddings.as_standard_layout();
    put_tensor(
        &mut buf,
        VOCAB_TENSOR,
        emb.shape(),
        emb.as_slice().expect("standard layout"),
    );
    buf
}

/// Parameters are written as `f32`; values that are not exactly
/// representable lose precision.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocabulary,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MarnError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(config, params, vocab)).map_err(|e| MarnError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(MarnError::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| MarnError::format(self.path, "tensor name is not UTF-8"))?;
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product::<usize>();
        let raw = self.take(count.checked_mul(4).ok_or_else(|| {
            MarnError::format(self.path, format!("tensor {name} is implausibly large"))
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MarnError::format(self.path, format!("tensor {name} has non-finite values")));
        }
        Ok((name, shape, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(MarnError::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(MarnError::format(path, format!("unsupported version {version}")));
    }
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| MarnError::format(path, format!("bad header: {e}")))?;
    let config = header.model;
    config.validate()?;
    let mut params = ModelParams::init(&config, 0)?;
    let n_tensors = r.u32()?;
    {
        let mut slots = params.tensors_mut();
        if n_tensors != slots.len() + 1 {
            return Err(MarnError::format(
                path,
                format!("expected {} tensors, found {n_tensors}", slots.len() + 1),
            ));
        }
        for slot in slots.iter_mut() {
            let (name, shape, data) = r.tensor()?;
            if name != slot.name || shape != slot.shape {
                return Err(MarnError::format(
                    path,
                    format!(
                        "tensor {name} {shape:?} where {} {:?} was expected",
                        slot.name, slot.shape
                    ),
                ));
            }
            slot.data.copy_from_slice(&data);
        }
    }
    let (name, shape, data) = r.tensor()?;
    if name != VOCAB_TENSOR || shape.len() != 2 || shape[0] != header.vocabulary.len() {
        return Err(MarnError::format(path, format!("bad vocabulary tensor {name} {shape:?}")));
    }
    if r.pos != bytes.len() {
        return Err(MarnError::format(path, "trailing bytes after the last tensor"));
    }
    let embeddings = Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked");
    let vocabulary = Vocabulary::from_parts(header.vocabulary, embeddings)?;
    if vocabulary.len() != config.vocab_size || vocabulary.embedding_dim() != config.d_w {
        return Err(MarnError::format(path, "vocabulary does not match the model configuration"));
    }
    Ok(Checkpoint {
        config,
        params,
        vocabulary,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MarnError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
