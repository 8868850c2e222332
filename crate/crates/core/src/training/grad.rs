use rayon::prelude::*;

use crate::model::{backward_sequence, forward_sequence, AdapterSet, FreezeMask, Gradients, ParameterStore};

use super::loss::{row_loss_and_grad, LossValue};
use super::{Batch, TrainError};

#[derive(Debug, Clone)]
pub struct LossAndGradients {
    pub loss: f64,
    pub positions: usize,
    pub grads: Gradients,
}

/// Mean next-token loss of a batch, forward only.
pub fn batch_loss(store: &ParameterStore, adapters: &AdapterSet, batch: &Batch) -> Result<LossValue, TrainError> {
    let vocab = store.config().vocab_size;
    let per_row: Vec<(f64, usize)> = (0..batch.len())
        .into_par_iter()
        .map(|b| -> Result<_, TrainError> {
            let Some((inputs, targets, mask)) = batch.shifted_row(b) else {
                return Ok((0.0, 0));
            };
            let (logits, _) = forward_sequence(store, adapters, inputs, false)?;
            let (sum, _) = row_loss_and_grad(&logits, vocab, targets, mask, 0.0);
            Ok((sum, mask.iter().filter(|&&m| m).count()))
        })
        .collect::<Result<_, _>>()?;
    let total: f64 = per_row.iter().map(|r| r.0).sum();
    let n: usize = per_row.iter().map(|r| r.1).sum();
    if n == 0 {
        return Err(TrainError::EmptyLossMask);
    }
    Ok(LossValue { loss: total / n as f64, positions: n })
}

/// Mean loss of the batch and its gradient for exactly the parameters named
/// in `mask`. Frozen parameters get no gradient storage.
pub fn backward(
    store: &ParameterStore,
    adapters: &AdapterSet,
    batch: &Batch,
    mask: &FreezeMask,
) -> Result<LossAndGradients, TrainError> {
    mask.validate(store, adapters)?;
    let n = batch.predicted_positions();
    if n == 0 {
        return Err(TrainError::EmptyLossMask);
    }
    let vocab = store.config().vocab_size;
    let scale = 1.0 / n as f64;
    let per_row: Vec<Option<(f64, Gradients)>> = (0..batch.len())
        .into_par_iter()
        .map(|b| -> Result<_, TrainError> {
            let Some((inputs, targets, row_mask)) = batch.shifted_row(b) else {
                return Ok(None);
            };
            let (logits, cache) = forward_sequence(store, adapters, inputs, true)?;
            let (sum, dlogits) = row_loss_and_grad(&logits, vocab, targets, row_mask, scale);
            let mut g = Gradients::default();
            backward_sequence(store, adapters, cache.as_ref().expect("cache kept"), &dlogits, mask, &mut g)?;
            Ok(Some((sum, g)))
        })
        .collect::<Result<_, _>>()?;
    // reduce in row order so the result does not depend on scheduling
    let mut grads = Gradients::default();
    let mut total = 0.0;
    for (sum, g) in per_row.into_iter().flatten() {
        total += sum;
        grads.accumulate(g);
    }
    // parameters that never saw a signal still get a (zero) gradient
    for name in mask.names() {
        if grads.get(name).is_none() {
            let len = store
                .get(name)
                .map(|p| p.tensor.numel())
                .or_else(|| adapters.tensor(name).map(|(t, _)| t.numel()))
                .unwrap_or(0);
            grads.insert(name, vec![0.0; len]);
        }
    }
    Ok(LossAndGradients { loss: total / n as f64, positions: n, grads })
}

/// Mean next-token loss over many rows, evaluated in fixed-size batches.
pub fn corpus_loss(
    store: &ParameterStore,
    adapters: &AdapterSet,
    rows: &[super::BatchRow],
    pad_id: u32,
) -> Result<LossValue, TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in rows.chunks(16) {
        let batch = Batch::from_rows(chunk, pad_id, "eval")?;
        if batch.predicted_positions() == 0 {
            continue;
        }
        let l = batch_loss(store, adapters, &batch)?;
        total += l.loss * l.positions as f64;
        n += l.positions;
    }
    if n == 0 {
        return Err(TrainError::EmptyLossMask);
    }
    Ok(LossValue { loss: total / n as f64, positions: n })
}

/// `exp` of [`corpus_loss`].
pub fn perplexity(store: &ParameterStore, adapters: &AdapterSet, rows: &[super::BatchRow], pad_id: u32) -> Result<f64, TrainError> {
    Ok(corpus_loss(store, adapters, rows, pad_id)?.loss.exp())
}
