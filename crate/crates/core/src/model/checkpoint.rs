//! Single-file model container.
//!
//! Layout: `NMC1`, a little-endian `u32` metadata length, the UTF-8 JSON
//! metadata document, every weight tensor as little-endian `f32` in parameter
//! registration order, then a little-endian CRC-32 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{HeadKind, ModelConfig};
use super::encoder::EncoderModel;
use super::ModelError;
use crate::bpe::Vocabulary;
use crate::data::LabelSet;
use crate::normalize::Scheme;

pub const MAGIC: &[u8; 4] = b"NMC1";
const FORMAT: &str = "nmc-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: String,
    version: u32,
    config: ModelConfig,
    head: HeadKind,
    scheme: Scheme,
    max_len: usize,
    labels: Option<LabelSet>,
    vocab: String,
    tensors: Vec<TensorEntry>,
}

/// A model together with everything needed to feed it raw names.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub scheme: Scheme,
    pub max_len: usize,
    pub labels: Option<LabelSet>,
}

impl Checkpoint {
    /// Fails when `vocab` does not match the model's embedding table.
    pub fn ensure_vocab(&self, vocab: &Vocabulary) -> Result<(), ModelError> {
        let model = self.model.config().vocab_size;
        if vocab.len() != model || *vocab != self.vocab {
            return Err(ModelError::VocabMismatch {
                model,
                vocab: vocab.len(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let meta = Metadata {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.model.config().clone(),
            head: self.model.head_kind(),
            scheme: self.scheme,
            max_len: self.max_len,
            labels: self.labels.clone(),
            vocab: self.vocab.to_text(),
            tensors: params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * params.n_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(ModelError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ModelError::Checksum { stored, computed });
        }
        if &body[..4] != MAGIC {
            return match &body[..3] {
                b"NMC" => Err(ModelError::Version(String::from_utf8_lossy(&body[..4]).into_owned())),
                _ => Err(ModelError::Format("bad magic bytes".into())),
            };
        }
        let meta_len = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
        let meta_end = 8usize
            .checked_add(meta_len)
            .filter(|&e| e <= body.len())
            .ok_or(ModelError::Truncated)?;
        let meta: Metadata = serde_json::from_slice(&body[8..meta_end])
            .map_err(|e| ModelError::Format(format!("metadata: {e}")))?;
        if meta.format != FORMAT {
            return Err(ModelError::Format(format!("unexpected format `{}`", meta.format)));
        }
        if meta.version != VERSION {
            return Err(ModelError::Version(meta.version.to_string()));
        }
        let vocab = Vocabulary::from_text(&meta.vocab)
            .map_err(|e| ModelError::Format(format!("embedded vocabulary: {e}")))?;
        if vocab.len() != meta.config.vocab_size {
            return Err(ModelError::ShapeInconsistency(format!(
                "embedded vocabulary has {} tokens, config says {}",
                vocab.len(),
                meta.config.vocab_size
            )));
        }
        if let (HeadKind::Classifier { n_classes }, Some(labels)) = (meta.head, &meta.labels) {
            if labels.len() != n_classes {
                return Err(ModelError::ShapeInconsistency(format!(
                    "{} labels for a {n_classes}-class head",
                    labels.len()
                )));
            }
        }

        let mut model = EncoderModel::skeleton(&meta.config, meta.head)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape.clone()))
            .collect();
        if expected.len() != meta.tensors.len() {
            return Err(ModelError::ShapeInconsistency(format!(
                "{} tensors listed, {} expected",
                meta.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&meta.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(ModelError::ShapeInconsistency(format!(
                    "tensor `{}` {:?}, expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let n_floats = model.params().n_elements();
        let weights = &body[meta_end..];
        if weights.len() != 4 * n_floats {
            return Err(ModelError::ShapeInconsistency(format!(
                "{} weight bytes for {n_floats} floats",
                weights.len()
            )));
        }
        let mut floats = weights
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for (_, t) in model.params_mut().tensors_mut() {
            for v in t.data.iter_mut() {
                *v = floats.next().expect("length checked");
            }
        }
        Ok(Self {
            model,
            vocab,
            scheme: meta.scheme,
            max_len: meta.max_len,
            labels: meta.labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_model(checkpoint: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    checkpoint.save(path)
}

pub fn load_model(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path)
}
