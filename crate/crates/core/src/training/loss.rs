use crate::model::Logits;

use super::TrainError;

/// Mean cross-entropy and the number of positions it averages over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub positions: usize,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Mean over unmasked positions of `-log softmax(logits)[target]`.
/// `logits.at(b, t)` scores `targets[b][t]`.
pub fn next_token_loss(logits: &Logits, targets: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<LossValue, TrainError> {
    if targets.len() != logits.batch || mask.len() != logits.batch {
        return Err(TrainError::Shape("batch sizes of logits, targets and mask differ".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..logits.batch {
        if targets[b].len() != logits.seq || mask[b].len() != logits.seq {
            return Err(TrainError::Shape(format!("row {b}: sequence lengths differ")));
        }
        for t in 0..logits.seq {
            if mask[b][t] {
                total -= log_softmax_at(logits.at(b, t), targets[b][t] as usize);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyLossMask);
    }
    Ok(LossValue { loss: total / n as f64, positions: n })
}

/// Sum of cross-entropies of one row and the gradient of `scale · sum`
/// with respect to its logits `[t × V]`.
pub(crate) fn row_loss_and_grad(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
    scale: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[target as usize];
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (gv, lv) in g.iter_mut().zip(row) {
            *gv = scale * (lv - lse).exp();
        }
        g[target as usize] -= scale;
    }
    (sum, grad)
}
