//! Transformer encoder, its two heads, weight transfer and the model
//! container file.

mod checkpoint;
mod config;
mod encoder;
mod masking;

use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub use checkpoint::{load_model, save_model, Checkpoint, MAGIC};
pub use config::{HeadKind, ModelConfig, DEFAULT_DROPOUT, DEFAULT_MAX_POSITIONS};
pub use encoder::{build_encoder, init_classifier_from_lm, Batch, EncoderModel, INIT_STD};
pub use masking::{mask_batch, MaskedBatch, DEFAULT_MASK_RATE};

use crate::data::LabelSet;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("a classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("model expects a vocabulary of {model} tokens but input needs {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_positions {max_positions}")]
    TooLong { len: usize, max_positions: usize },
    #[error("operation requires a {expected} head")]
    WrongHead { expected: &'static str },
    #[error("mask rate {0} must lie strictly between 0 and 1")]
    InvalidMaskRate(f32),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("cannot access model file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("unsupported model file version: {0}")]
    Version(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model file shape inconsistency: {0}")]
    ShapeInconsistency(String),
}

/// Per-class probabilities for one name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub labels: LabelSet,
    pub probabilities: Vec<f32>,
}

impl Prediction {
    /// Index of the most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    pub fn label(&self) -> &str {
        self.labels.label(self.argmax()).unwrap_or("")
    }

    /// `(label, probability)` pairs, most probable first.
    pub fn ranked(&self) -> Vec<(&str, f32)> {
        let mut pairs: Vec<(usize, f32)> = self.probabilities.iter().copied().enumerate().collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs
            .into_iter()
            .map(|(i, p)| (self.labels.label(i).unwrap_or(""), p))
            .collect()
    }
}

/// First index holding the maximum value.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
