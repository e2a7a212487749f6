use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and regularization settings of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f32,
}

/// Which output head sits on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    MaskedLm,
    Classifier { n_classes: usize },
}

pub const DEFAULT_MAX_POSITIONS: usize = 64;
pub const DEFAULT_DROPOUT: f32 = 0.1;

impl ModelConfig {
    /// 768 hidden, 6 layers, 12 heads, 3072 feed-forward.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 768,
            n_layers: 6,
            n_heads: 12,
            ffn_size: 3072,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_size: 256,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_size", self.ffn_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.max_positions < 3 {
            return Err(ModelError::InvalidConfig("max_positions must be at least 3".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    /// Closed-form parameter count for the encoder plus `head`.
    pub fn parameter_count(&self, head: HeadKind) -> usize {
        let h = self.hidden_size;
        let f = self.ffn_size;
        let dense = |i: usize, o: usize| i * o + o;
        let norm = 2 * h;
        let embeddings = self.vocab_size * h + self.max_positions * h + norm;
        let layer = 4 * dense(h, h) + norm + dense(h, f) + dense(f, h) + norm;
        let head = match head {
            HeadKind::MaskedLm => dense(h, h) + norm + dense(h, self.vocab_size),
            HeadKind::Classifier { n_classes } => dense(h, h) + dense(h, n_classes),
        };
        embeddings + self.n_layers * layer + head
    }
}
