use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InstructionExample, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionDataset {
    pub name: String,
    pub examples: Vec<InstructionExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Per-dataset weights; datasets not listed weigh 1.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default = "default_share")]
    pub translation_share: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_share() -> f64 {
    0.24
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec { weights: BTreeMap::new(), translation_share: default_share(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub example: usize,
    pub is_translation: bool,
}

/// Seeded sampler with replacement. Each draw first picks the translation
/// or non-translation pool with probability `translation_share` (falling
/// back to the other pool if one is empty), then a dataset within the pool
/// by weight, then an example uniformly.
#[derive(Debug, Clone)]
pub struct Mixture<'a> {
    datasets: &'a [InstructionDataset],
    /// `[non-translation, translation]`: (dataset, weight, example indices)
    pools: [Vec<(usize, f64, Vec<usize>)>; 2],
    share: f64,
    rng: ChaCha8Rng,
}

impl<'a> Mixture<'a> {
    pub fn new(datasets: &'a [InstructionDataset], spec: &MixtureSpec) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&spec.translation_share) {
            return Err(TrainError::Config(format!("translation_share {} is outside [0, 1]", spec.translation_share)));
        }
        for (name, &w) in &spec.weights {
            if !datasets.iter().any(|d| &d.name == name) {
                return Err(TrainError::Config(format!("weight given for unknown dataset `{name}`")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("weight of `{name}` must be finite and non-negative")));
            }
        }
        let mut pools: [Vec<(usize, f64, Vec<usize>)>; 2] = [Vec::new(), Vec::new()];
        for (di, d) in datasets.iter().enumerate() {
            let w = spec.weights.get(&d.name).copied().unwrap_or(1.0);
            if w == 0.0 {
                continue;
            }
            for (kind, pool) in pools.iter_mut().enumerate() {
                let idx: Vec<usize> =
                    d.examples.iter().enumerate().filter(|(_, e)| e.is_translation == (kind == 1)).map(|(i, _)| i).collect();
                if !idx.is_empty() {
                    pool.push((di, w, idx));
                }
            }
        }
        if pools.iter().all(Vec::is_empty) {
            return Err(TrainError::Data("mixture has no examples with positive weight".into()));
        }
        Ok(Mixture { datasets, pools, share: spec.translation_share, rng: ChaCha8Rng::seed_from_u64(spec.seed) })
    }

    pub fn draw(&mut self) -> Draw {
        let want = usize::from(self.rng.random_bool(self.share));
        let kind = if self.pools[want].is_empty() { 1 - want } else { want };
        let pool = &self.pools[kind];
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut x = self.rng.random_range(0.0..total);
        let mut pick = pool.len() - 1;
        for (i, p) in pool.iter().enumerate() {
            if x < p.1 {
                pick = i;
                break;
            }
            x -= p.1;
        }
        let (dataset, _, idx) = &pool[pick];
        let example = idx[self.rng.random_range(0..idx.len())];
        Draw { dataset: *dataset, example, is_translation: kind == 1 }
    }

    pub fn example(&self, d: Draw) -> &'a InstructionExample {
        &self.datasets[d.dataset].examples[d.example]
    }
}

impl Iterator for Mixture<'_> {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        Some(self.draw())
    }
}

pub fn build_mixture<'a>(datasets: &'a [InstructionDataset], spec: &MixtureSpec) -> Result<Mixture<'a>, TrainError> {
    Mixture::new(datasets, spec)
}
