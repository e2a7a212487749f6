use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{Batch, EncoderModel};
use super::ModelError;
use crate::bpe::{TokenSequence, Vocabulary, MASK_ID, N_SPECIALS};
use crate::nn::{Graph, NnError, Var};

pub const DEFAULT_MASK_RATE: f32 = 0.15;

/// A batch with some positions corrupted and the original ids kept as
/// targets. `targets[i]` is `None` where no prediction is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: Batch,
    pub targets: Vec<Option<u32>>,
}

impl MaskedBatch {
    pub fn n_selected(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }
}

/// Selects each non-special, unpadded position with probability `mask_rate`.
/// Selected positions become `[MASK]` 80% of the time, a random non-special
/// token 10% of the time, and stay unchanged otherwise.
pub fn mask_batch<R: Rng + ?Sized>(
    sequences: &[TokenSequence],
    vocab_size: usize,
    mask_rate: f32,
    rng: &mut R,
) -> Result<MaskedBatch, ModelError> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(ModelError::InvalidMaskRate(mask_rate));
    }
    let mut batch = Batch::from_sequences(sequences)?;
    let mut targets = vec![None; batch.ids.len()];
    for (i, id) in batch.ids.iter_mut().enumerate() {
        if batch.mask[i] == 0 || Vocabulary::is_special(*id) {
            continue;
        }
        if rng.random::<f32>() >= mask_rate {
            continue;
        }
        targets[i] = Some(*id);
        let roll: f32 = rng.random();
        if roll < 0.8 {
            *id = MASK_ID;
        } else if roll < 0.9 && vocab_size > N_SPECIALS {
            *id = rng.random_range(N_SPECIALS as u32..vocab_size as u32);
        }
    }
    Ok(MaskedBatch { batch, targets })
}

impl EncoderModel {
    /// Records the masked-LM loss on `g`, averaged over selected positions.
    pub fn mlm_loss_var(
        &self,
        g: &mut Graph,
        masked: &MaskedBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, ModelError> {
        let rows: Vec<usize> = masked
            .targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|_| i))
            .collect();
        if rows.is_empty() {
            return Err(ModelError::Nn(NnError::NoTargets));
        }
        let targets: Vec<Option<u32>> = rows.iter().map(|&r| masked.targets[r]).collect();
        let hidden = self.encode(g, &masked.batch, rng)?;
        let logits = self.mlm_logits(g, hidden, &rows)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Eval-mode masked-LM loss.
    pub fn mlm_loss(&self, masked: &MaskedBatch) -> Result<f32, ModelError> {
        let mut g = Graph::with_params(self.params(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = self.mlm_loss_var(&mut g, masked, &mut rng)?;
        Ok(g.value(loss)[0])
    }
}
