use serde::{Deserialize, Serialize};

use super::TrainError;

/// One token sequence with a per-position loss mask. `loss_mask[t]` marks
/// token `t` as a prediction target; position 0 is never predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRow {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Set when the row had to be shortened to fit the context window.
    pub truncated: bool,
}

impl BatchRow {
    /// A row whose every position after the first is a target.
    pub fn fully_supervised(ids: Vec<u32>) -> Self {
        let loss_mask = (0..ids.len()).map(|t| t > 0).collect();
        BatchRow { ids, loss_mask, truncated: false }
    }

    pub fn predicted_positions(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Rectangular `[B × T]` ids and loss mask, padded on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub tag: String,
}

impl Batch {
    pub fn from_rows(rows: &[BatchRow], pad_id: u32, tag: impl Into<String>) -> Result<Self, TrainError> {
        let width = rows.iter().map(|r| r.ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut loss_mask = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.ids.len() != r.loss_mask.len() {
                return Err(TrainError::Shape(format!("row {i}: ids and loss mask lengths differ")));
            }
            let mut id_row = r.ids.clone();
            let mut m_row = r.loss_mask.clone();
            if let Some(first) = m_row.first_mut() {
                *first = false;
            }
            id_row.resize(width, pad_id);
            m_row.resize(width, false);
            ids.push(id_row);
            loss_mask.push(m_row);
        }
        Ok(Batch { ids, loss_mask, tag: tag.into() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn predicted_positions(&self) -> usize {
        self.loss_mask.iter().map(|m| m.iter().skip(1).filter(|&&v| v).count()).sum()
    }

    pub fn token_count(&self) -> usize {
        self.predicted_positions()
    }

    /// Row `b` cut to the shortest prefix that still contains every target:
    /// `(inputs, targets, mask)` aligned so `inputs[t]` predicts `targets[t]`.
    pub(crate) fn shifted_row(&self, b: usize) -> Option<(&[u32], &[u32], &[bool])> {
        let m = &self.loss_mask[b];
        let last = m.iter().rposition(|&v| v)?;
        if last == 0 {
            return None;
        }
        let ids = &self.ids[b];
        Some((&ids[..last], &ids[1..=last], &m[1..=last]))
    }
}
