//! Post-norm transformer encoder with learned absolute positions and either
//! a masked-LM head or a `[CLS]` classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadKind, ModelConfig};
use super::ModelError;
use crate::bpe::TokenSequence;
use crate::nn::{softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f32 = 0.02;
pub const LAYER_NORM_EPS: f32 = 1e-12;

const MLM_PREFIX: &str = "mlm.";
const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    query: Dense,
    key: Dense,
    value: Dense,
    attn_out: Dense,
    attn_norm: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
    ffn_norm: Norm,
}

#[derive(Debug, Clone, PartialEq)]
struct Embeddings {
    word: ParamId,
    position: ParamId,
    norm: Norm,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    MaskedLm { dense: Dense, norm: Norm, decoder: Dense },
    Classifier { dense: Dense, out_proj: Dense, n_classes: usize },
}

/// How freshly registered tensors are filled.
enum Init<'r> {
    Random(&'r mut ChaCha8Rng),
    Zeros,
}

struct Builder<'a, 'r> {
    store: &'a mut ParamStore,
    init: Init<'r>,
}

impl Builder<'_, '_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = match &mut self.init {
            Init::Random(rng) => Tensor::truncated_normal(shape, INIT_STD, *rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        Dense {
            weight: self.weight(format!("{name}.weight"), &[inputs, outputs]),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn encoder(&mut self, c: &ModelConfig) -> (Embeddings, Vec<Layer>) {
        let h = c.hidden_size;
        let embeddings = Embeddings {
            word: self.weight("embeddings.word".into(), &[c.vocab_size, h]),
            position: self.weight("embeddings.position".into(), &[c.max_positions, h]),
            norm: self.norm("embeddings.norm", h),
        };
        let layers = (0..c.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                Layer {
                    query: self.dense(&format!("{p}.attention.query"), h, h),
                    key: self.dense(&format!("{p}.attention.key"), h, h),
                    value: self.dense(&format!("{p}.attention.value"), h, h),
                    attn_out: self.dense(&format!("{p}.attention.output"), h, h),
                    attn_norm: self.norm(&format!("{p}.attention.norm"), h),
                    ffn_in: self.dense(&format!("{p}.ffn.intermediate"), h, c.ffn_size),
                    ffn_out: self.dense(&format!("{p}.ffn.output"), c.ffn_size, h),
                    ffn_norm: self.norm(&format!("{p}.ffn.norm"), h),
                }
            })
            .collect();
        (embeddings, layers)
    }

    fn head(&mut self, c: &ModelConfig, kind: HeadKind) -> Head {
        let h = c.hidden_size;
        match kind {
            HeadKind::MaskedLm => Head::MaskedLm {
                dense: self.dense("mlm.dense", h, h),
                norm: self.norm("mlm.norm", h),
                decoder: self.dense("mlm.decoder", h, c.vocab_size),
            },
            HeadKind::Classifier { n_classes } => Head::Classifier {
                dense: self.dense("classifier.dense", h, h),
                out_proj: self.dense("classifier.out_proj", h, n_classes),
                n_classes,
            },
        }
    }
}

/// A batch of token id rows trimmed to the longest unpadded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let seq = seqs.iter().map(TokenSequence::length).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let n = s.ids.len().min(seq);
            ids.extend_from_slice(&s.ids[..n]);
            mask.extend_from_slice(&s.mask[..n]);
            ids.resize(ids.len() + seq - n, crate::bpe::PAD_ID);
            mask.resize(mask.len() + seq - n, 0);
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }
}

/// Encoder weights plus one output head.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    embeddings: Embeddings,
    layers: Vec<Layer>,
    head: Head,
}

impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.head_kind() == other.head_kind() && self.params == other.params
    }
}

/// Weights of the encoder with a masked-LM head, drawn from a seeded
/// truncated normal (std 0.02); biases start at zero and norms at identity.
pub fn build_encoder(config: &ModelConfig, seed: u64) -> Result<EncoderModel, ModelError> {
    EncoderModel::new(config, HeadKind::MaskedLm, seed)
}

/// Copies every encoder weight of `lm` and attaches a freshly initialized
/// classification head. The masked-LM head is dropped.
pub fn init_classifier_from_lm(lm: &EncoderModel, n_classes: usize, seed: u64) -> Result<EncoderModel, ModelError> {
    if n_classes < 2 {
        return Err(ModelError::TooFewClasses(n_classes));
    }
    let mut params = lm.params.clone();
    params.split_off_prefix(MLM_PREFIX);
    params.split_off_prefix(CLASSIFIER_PREFIX);
    params.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Builder {
        store: &mut params,
        init: Init::Random(&mut rng),
    }
    .head(&lm.config, HeadKind::Classifier { n_classes });
    Ok(EncoderModel {
        config: lm.config.clone(),
        params,
        embeddings: lm.embeddings.clone(),
        layers: lm.layers.clone(),
        head,
    })
}

impl EncoderModel {
    pub fn new(config: &ModelConfig, head: HeadKind, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(config, head, Init::Random(&mut rng))
    }

    /// Zero-filled model with the canonical parameter layout.
    pub fn skeleton(config: &ModelConfig, head: HeadKind) -> Result<Self, ModelError> {
        Self::assemble(config, head, Init::Zeros)
    }

    fn assemble(config: &ModelConfig, head: HeadKind, init: Init<'_>) -> Result<Self, ModelError> {
        config.validate()?;
        if let HeadKind::Classifier { n_classes } = head {
            if n_classes < 2 {
                return Err(ModelError::TooFewClasses(n_classes));
            }
        }
        let mut params = ParamStore::new();
        let mut builder = Builder {
            store: &mut params,
            init,
        };
        let (embeddings, layers) = builder.encoder(config);
        let head = builder.head(config, head);
        Ok(Self {
            config: config.clone(),
            params,
            embeddings,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::MaskedLm { .. } => HeadKind::MaskedLm,
            Head::Classifier { n_classes, .. } => HeadKind::Classifier { n_classes },
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.head {
            Head::Classifier { n_classes, .. } => Some(n_classes),
            Head::MaskedLm { .. } => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.n_elements()
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.seq > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: batch.seq,
                max_positions: self.config.max_positions,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::VocabMismatch {
                model: self.config.vocab_size,
                vocab: bad as usize + 1,
            });
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph, x: Var, d: Dense) -> Result<Var, ModelError> {
        let w = g.param(d.weight);
        let b = g.param(d.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var, ModelError> {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }

    /// Hidden states `[batch * seq, hidden]` before any head.
    pub fn encode(&self, g: &mut Graph, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        let p = self.config.dropout_rate;
        let word = g.param(self.embeddings.word);
        let position = g.param(self.embeddings.position);
        let positions: Vec<u32> = (0..batch.batch).flat_map(|_| 0..batch.seq as u32).collect();
        let tok = g.embedding(word, &batch.ids)?;
        let pos = g.embedding(position, &positions)?;
        let x = g.add(tok, pos)?;
        let x = self.norm(g, x, self.embeddings.norm)?;
        let mut x = g.dropout(x, p, rng)?;

        for layer in &self.layers {
            let q = self.dense(g, x, layer.query)?;
            let k = self.dense(g, x, layer.key)?;
            let v = self.dense(g, x, layer.value)?;
            let ctx = g.attention(q, k, v, &batch.mask, batch.batch, self.config.n_heads)?;
            let attn = self.dense(g, ctx, layer.attn_out)?;
            let attn = g.dropout(attn, p, rng)?;
            let res = g.add(x, attn)?;
            let h = self.norm(g, res, layer.attn_norm)?;

            let f = self.dense(g, h, layer.ffn_in)?;
            let f = g.gelu(f)?;
            let f = self.dense(g, f, layer.ffn_out)?;
            let f = g.dropout(f, p, rng)?;
            let res = g.add(h, f)?;
            x = self.norm(g, res, layer.ffn_norm)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the given rows of `hidden`.
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var, ModelError> {
        let Head::MaskedLm { dense, norm, decoder } = self.head else {
            return Err(ModelError::WrongHead { expected: "masked_lm" });
        };
        let x = g.select_rows(hidden, rows)?;
        let x = self.dense(g, x, dense)?;
        let x = g.gelu(x)?;
        let x = self.norm(g, x, norm)?;
        self.dense(g, x, decoder)
    }

    /// Class logits `[batch, n_classes]` read from each row's `[CLS]` position.
    pub fn class_logits(
        &self,
        g: &mut Graph,
        hidden: Var,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, ModelError> {
        let Head::Classifier { dense, out_proj, .. } = self.head else {
            return Err(ModelError::WrongHead { expected: "classifier" });
        };
        let p = self.config.dropout_rate;
        let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
        let x = g.select_rows(hidden, &cls_rows)?;
        let x = g.dropout(x, p, rng)?;
        let x = self.dense(g, x, dense)?;
        let x = g.tanh(x)?;
        let x = g.dropout(x, p, rng)?;
        self.dense(g, x, out_proj)
    }

    /// Eval-mode encoder output.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::with_params(&self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.encode(&mut g, batch, &mut rng)?;
        Ok(g.value(h).to_vec())
    }

    /// Eval-mode class logits, one row per sequence.
    pub fn logits(&self, batch: &Batch) -> Result<Vec<Vec<f32>>, ModelError> {
        let n = self.n_classes().ok_or(ModelError::WrongHead { expected: "classifier" })?;
        let mut g = Graph::with_params(&self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.encode(&mut g, batch, &mut rng)?;
        let logits = self.class_logits(&mut g, h, batch, &mut rng)?;
        Ok(g.value(logits).chunks(n).map(<[f32]>::to_vec).collect())
    }

    /// Eval-mode class probabilities, one row per sequence.
    pub fn probabilities(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f32>>, ModelError> {
        let batch = Batch::from_sequences(seqs)?;
        let logits = self.logits(&batch)?;
        Ok(logits
            .iter()
            .map(|row| softmax_rows(row, row.len()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{CLS_ID, PAD_ID, SEP_ID};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            hidden_size: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_size: 16,
            max_positions: 10,
            dropout_rate: 0.1,
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut full = vec![CLS_ID];
        full.extend(ids);
        full.push(SEP_ID);
        let n = full.len();
        full.resize(max_len, PAD_ID);
        let mut mask = vec![1; n];
        mask.resize(max_len, 0);
        TokenSequence {
            word_start: vec![false; max_len],
            ids: full,
            mask,
            scheme: crate::normalize::Scheme::CaseMarked,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_encoder(&tiny(), 7).unwrap();
        let b = build_encoder(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_encoder(&tiny(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_census_matches_store() {
        let c = tiny();
        let m = build_encoder(&c, 1).unwrap();
        assert_eq!(m.parameter_count(), c.parameter_count(HeadKind::MaskedLm));
        let cls = init_classifier_from_lm(&m, 3, 1).unwrap();
        assert_eq!(
            cls.parameter_count(),
            c.parameter_count(HeadKind::Classifier { n_classes: 3 })
        );
        let desk = ModelConfig::desk(500);
        let m = build_encoder(&desk, 1).unwrap();
        assert_eq!(m.parameter_count(), desk.parameter_count(HeadKind::MaskedLm));
    }

    #[test]
    fn init_distribution() {
        let m = build_encoder(&ModelConfig::desk(300), 3).unwrap();
        let word = m.params().get(m.params().find("embeddings.word").unwrap());
        let n = word.len() as f32;
        let mean = word.data.iter().sum::<f32>() / n;
        let std = (word.data.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        // std of a normal truncated at two sigma is ~0.88 sigma
        assert!((std - 0.0176).abs() < 1e-3, "std {std}");
        assert!(word.data.iter().all(|x| x.abs() <= 2.0 * INIT_STD));
        let bias = m.params().get(m.params().find("layers.0.attention.query.bias").unwrap());
        assert!(bias.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk(100);
        c.hidden_size = 64;
        c.n_heads = 12;
        assert!(matches!(build_encoder(&c, 0), Err(ModelError::InvalidConfig(_))));
        let m = build_encoder(&tiny(), 0).unwrap();
        assert!(matches!(init_classifier_from_lm(&m, 1, 0), Err(ModelError::TooFewClasses(1))));
    }

    #[test]
    fn transfer_copies_encoder() {
        let lm = build_encoder(&tiny(), 4).unwrap();
        let cls = init_classifier_from_lm(&lm, 3, 9).unwrap();
        for name in ["layers.0.attention.query.weight", "embeddings.word", "layers.1.ffn.norm.gamma"] {
            let a = lm.params().get(lm.params().find(name).unwrap());
            let b = cls.params().get(cls.params().find(name).unwrap());
            assert_eq!(
                a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        assert!(cls.params().find("mlm.decoder.weight").is_none());
        assert_eq!(cls.n_classes(), Some(3));
    }

    #[test]
    fn probabilities_are_distributions_and_padding_invariant() {
        let lm = build_encoder(&tiny(), 4).unwrap();
        let cls = init_classifier_from_lm(&lm, 4, 9).unwrap();
        let a = seq(&[5, 6, 7], 8);
        let mut b = a.clone();
        b.ids[6] = 11;
        b.ids[7] = 13;
        let pa = cls.probabilities(std::slice::from_ref(&a)).unwrap();
        let pb = cls.probabilities(std::slice::from_ref(&b)).unwrap();
        assert_eq!(pa, pb);
        assert!((pa[0].iter().sum::<f32>() - 1.0).abs() < 1e-5);
        // batched together with a longer sequence gives the same answer
        let long = seq(&[5, 6, 7, 8, 9, 10], 8);
        let both = cls.probabilities(&[a.clone(), long]).unwrap();
        for (x, y) in both[0].iter().zip(&pa[0]) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_out_of_vocab_and_long_input() {
        let lm = build_encoder(&tiny(), 4).unwrap();
        let cls = init_classifier_from_lm(&lm, 2, 9).unwrap();
        assert!(matches!(
            cls.probabilities(&[seq(&[25], 6)]),
            Err(ModelError::VocabMismatch { model: 20, .. })
        ));
        assert!(matches!(
            cls.probabilities(&[seq(&[5; 10], 12)]),
            Err(ModelError::TooLong { .. })
        ));
        assert!(matches!(lm.logits(&Batch::from_sequences(&[seq(&[5], 4)]).unwrap()), Err(ModelError::WrongHead { .. })));
    }
}
