//! Masked-LM pretraining and classifier fine-tuning loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{self, BpeError, TokenSequence, Vocabulary};
use crate::data::{DatasetSplit, NameRecord};
use crate::model::{
    argmax, build_encoder, mask_batch, Batch, EncoderModel, ModelConfig, ModelError, DEFAULT_MASK_RATE,
};
use crate::normalize::{NormalizeError, NormalizedName, Scheme};
use crate::nn::{AdamW, AdamWConfig, Graph, NnError};

/// Upper bound on trainable weights unless overridden; the full-size model
/// (about 44M) fits.
pub const DEFAULT_MAX_PARAMS: usize = 60_000_000;

// Offsets keep the shuffling, masking and dropout streams independent.
const MASK_STREAM: u64 = 0x6d61_736b;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("label id {label_id} out of range for a {n_classes}-class head")]
    LabelOutOfRange { label_id: usize, n_classes: usize },
    #[error("model has {params} parameters, above the ceiling of {ceiling}")]
    TooLarge { params: usize, ceiling: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error("cannot normalize `{first} {last}`: {source}")]
    Normalize {
        first: String,
        last: String,
        #[source]
        source: NormalizeError,
    },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub max_len: usize,
    /// Held-out evaluation period in optimizer steps; 0 disables it.
    pub eval_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub max_params: usize,
    /// Inverse-frequency class weights in the classifier loss.
    pub class_weighting: bool,
    pub mask_rate: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epochs: 4,
            batch_size: 128,
            learning_rate: 2e-5,
            weight_decay: 2e-5,
            seed: 42,
            max_len: bpe::DEFAULT_MAX_LEN,
            eval_every: 0,
            max_steps: None,
            max_params: DEFAULT_MAX_PARAMS,
            class_weighting: false,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.n_epochs == 0 {
            return bad("n_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} is below the minimum of 3", self.max_len));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1 when set".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate {} must lie strictly between 0 and 1", self.mask_rate));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }

    fn check_model(&self, config: &ModelConfig, params: usize) -> Result<(), TrainError> {
        if params > self.max_params {
            return Err(TrainError::TooLarge {
                params,
                ceiling: self.max_params,
            });
        }
        if self.max_len > config.max_positions {
            return Err(TrainError::InvalidConfig(format!(
                "max_len {} exceeds the model's max_positions {}",
                self.max_len, config.max_positions
            )));
        }
        Ok(())
    }
}

/// Training loss per optimizer step plus optional held-out evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<(usize, f32)>,
    pub evals: Vec<(usize, f32)>,
}

impl LossCurve {
    pub fn first_loss(&self) -> Option<f32> {
        self.steps.first().map(|p| p.1)
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.steps.last().map(|p| p.1)
    }

    /// Mean loss over steps `from..=to`.
    pub fn mean_loss(&self, from: usize, to: usize) -> Option<f32> {
        let xs: Vec<f32> = self
            .steps
            .iter()
            .filter(|(s, _)| (from..=to).contains(s))
            .map(|p| p.1)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f32>() / xs.len() as f32)
    }

    /// `step loss` lines, then `step eval` lines under their own header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# step\tloss\n");
        for (s, l) in &self.steps {
            let _ = writeln!(out, "{s}\t{l}");
        }
        if !self.evals.is_empty() {
            out.push_str("# step\teval_accuracy\n");
            for (s, m) in &self.evals {
                let _ = writeln!(out, "{s}\t{m}");
            }
        }
        out
    }
}

pub fn normalize_record(first: &str, last: &str, scheme: Scheme) -> Result<NormalizedName, TrainError> {
    scheme.apply(first, last).map_err(|source| TrainError::Normalize {
        first: first.to_string(),
        last: last.to_string(),
        source,
    })
}

pub fn encode_name(
    first: &str,
    last: &str,
    scheme: Scheme,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TrainError> {
    let name = normalize_record(first, last, scheme)?;
    Ok(bpe::encode(&name, vocab, max_len)?)
}

pub fn encode_records(
    records: &[NameRecord],
    scheme: Scheme,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>, TrainError> {
    records
        .iter()
        .map(|r| encode_name(&r.first_name, &r.last_name, scheme, vocab, max_len))
        .collect()
}

fn step_limit_reached(config: &TrainConfig, steps: usize) -> bool {
    config.max_steps.is_some_and(|m| steps >= m)
}

/// Pretrains a fresh encoder with the masked-LM objective.
pub fn train_mlm(
    corpus: &[NormalizedName],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(EncoderModel, LossCurve), TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if model_config.vocab_size != vocab.len() {
        return Err(ModelError::VocabMismatch {
            model: model_config.vocab_size,
            vocab: vocab.len(),
        }
        .into());
    }
    model_config.validate()?;
    config.check_model(
        model_config,
        model_config.parameter_count(crate::model::HeadKind::MaskedLm),
    )?;
    let mut model = build_encoder(model_config, config.seed)?;
    let seqs: Vec<TokenSequence> = corpus
        .iter()
        .map(|n| bpe::encode(n, vocab, config.max_len))
        .collect::<Result<_, _>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed ^ MASK_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut opt = config.optimizer();
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut steps = 0;

    'epochs: for _ in 0..config.n_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let masked = mask_batch(&batch, vocab.len(), config.mask_rate, &mut mask_rng)?;
            if masked.n_selected() == 0 {
                continue;
            }
            let mut g = Graph::with_params(model.params(), true);
            let loss = model.mlm_loss_var(&mut g, &masked, &mut dropout_rng)?;
            let value = g.value(loss)[0];
            let grads = g.backward(loss)?;
            drop(g);
            apply(&mut model, &mut opt, grads)?;
            steps += 1;
            curve.steps.push((steps, value));
            if step_limit_reached(config, steps) {
                break 'epochs;
            }
        }
    }
    Ok((model, curve))
}

fn apply(model: &mut EncoderModel, opt: &mut AdamW, grads: Vec<Vec<f32>>) -> Result<(), TrainError> {
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate_grads(grads);
    opt.step(params)?;
    params.zero_grad();
    Ok(())
}

/// Inverse-frequency weights `n / (k * count_c)`, 0 for absent classes.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f32;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f32 * c as f32) })
        .collect()
}

/// Fine-tunes `init` (which must carry a classification head) on the train
/// side of `split`. The test side is only touched for periodic evaluation.
pub fn train_classifier(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    scheme: Scheme,
    init: EncoderModel,
    config: &TrainConfig,
) -> Result<(EncoderModel, LossCurve), TrainError> {
    config.validate()?;
    let n_classes = init
        .n_classes()
        .ok_or(ModelError::WrongHead { expected: "classifier" })?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if let Some(r) = split.train.iter().chain(&split.test).find(|r| r.label_id >= n_classes) {
        return Err(TrainError::LabelOutOfRange {
            label_id: r.label_id,
            n_classes,
        });
    }
    if init.config().vocab_size != vocab.len() {
        return Err(ModelError::VocabMismatch {
            model: init.config().vocab_size,
            vocab: vocab.len(),
        }
        .into());
    }
    config.check_model(init.config(), init.parameter_count())?;

    let train_seqs = encode_records(&split.train, scheme, vocab, config.max_len)?;
    let labels: Vec<usize> = split.train.iter().map(|r| r.label_id).collect();
    let weights = if config.class_weighting {
        class_weights(&labels, n_classes)
    } else {
        vec![1.0; n_classes]
    };
    let test_seqs = if config.eval_every > 0 && !split.test.is_empty() {
        encode_records(&split.test, scheme, vocab, config.max_len)?
    } else {
        Vec::new()
    };
    let test_labels: Vec<usize> = split.test.iter().map(|r| r.label_id).collect();

    let mut model = init;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut opt = config.optimizer();
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut steps = 0;

    'epochs: for _ in 0..config.n_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let targets: Vec<Option<u32>> = chunk.iter().map(|&i| Some(labels[i] as u32)).collect();
            let row_weights: Vec<f32> = chunk.iter().map(|&i| weights[labels[i]]).collect();
            let batch = Batch::from_sequences(&seqs)?;

            let mut g = Graph::with_params(model.params(), true);
            let hidden = model.encode(&mut g, &batch, &mut dropout_rng)?;
            let logits = model.class_logits(&mut g, hidden, &batch, &mut dropout_rng)?;
            let loss = g.weighted_cross_entropy(logits, &targets, &row_weights)?;
            let value = g.value(loss)[0];
            let grads = g.backward(loss)?;
            drop(g);
            apply(&mut model, &mut opt, grads)?;
            steps += 1;
            curve.steps.push((steps, value));

            if !test_seqs.is_empty() && steps % config.eval_every == 0 {
                curve.evals.push((steps, accuracy(&model, &test_seqs, &test_labels)?));
            }
            if step_limit_reached(config, steps) {
                break 'epochs;
            }
        }
    }
    Ok((model, curve))
}

/// Eval-mode argmax predictions in chunks of `chunk` sequences.
pub fn predict_classes(model: &EncoderModel, seqs: &[TokenSequence], chunk: usize) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = Batch::from_sequences(part)?;
        out.extend(model.logits(&batch)?.iter().map(|row| argmax(row)));
    }
    Ok(out)
}

fn accuracy(model: &EncoderModel, seqs: &[TokenSequence], labels: &[usize]) -> Result<f32, ModelError> {
    let predicted = predict_classes(model, seqs, 256)?;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f32 / labels.len() as f32)
}
