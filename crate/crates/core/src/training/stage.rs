use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AdapterSet, FreezeMask, ParameterStore};

use super::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use super::{backward, Batch, BatchRow, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Full training of a base model from scratch (desk-scale stand-in for
    /// a pretrained checkpoint).
    BasePretrain,
    EmbedAlignMono,
    EmbedAlignBilingual,
    LoraPretrain,
    InstructTune,
}

impl StageKind {
    pub const ADAPTATION: [StageKind; 4] =
        [StageKind::EmbedAlignMono, StageKind::EmbedAlignBilingual, StageKind::LoraPretrain, StageKind::InstructTune];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::BasePretrain => "base_pretrain",
            StageKind::EmbedAlignMono => "embed_align_mono",
            StageKind::EmbedAlignBilingual => "embed_align_bilingual",
            StageKind::LoraPretrain => "lora_pretrain",
            StageKind::InstructTune => "instruct_tune",
        }
    }

    pub fn parse(s: &str) -> Option<StageKind> {
        [StageKind::BasePretrain].into_iter().chain(StageKind::ADAPTATION).find(|k| k.name() == s)
    }

    pub fn is_alignment(self) -> bool {
        matches!(self, StageKind::EmbedAlignMono | StageKind::EmbedAlignBilingual)
    }

    pub fn default_lr(self) -> f64 {
        match self {
            StageKind::BasePretrain | StageKind::EmbedAlignMono | StageKind::EmbedAlignBilingual => 3e-4,
            StageKind::LoraPretrain | StageKind::InstructTune => 1e-4,
        }
    }
}

/// Trainable names for a stage: embeddings and head for alignment; those
/// plus every adapter tensor for LoRA pretraining and instruction tuning.
pub fn stage_mask(kind: StageKind, store: &ParameterStore, adapters: &AdapterSet) -> Result<FreezeMask, TrainError> {
    let mask = match kind {
        StageKind::BasePretrain => FreezeMask::everything(store, adapters),
        StageKind::EmbedAlignMono | StageKind::EmbedAlignBilingual => FreezeMask::embeddings_and_head(),
        StageKind::LoraPretrain if adapters.is_empty() => {
            return Err(TrainError::Config("LoRA pretraining needs attached adapters".into()))
        }
        StageKind::LoraPretrain | StageKind::InstructTune => FreezeMask::embeddings_head_and_adapters(adapters),
    };
    mask.validate(store, adapters)?;
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct TrainingStage {
    pub kind: StageKind,
    pub freeze_mask: FreezeMask,
    pub data: Vec<BatchRow>,
    pub pad_id: u32,
}

impl TrainingStage {
    pub fn new(
        kind: StageKind,
        store: &ParameterStore,
        adapters: &AdapterSet,
        data: Vec<BatchRow>,
        pad_id: u32,
    ) -> Result<Self, TrainError> {
        Ok(TrainingStage { kind, freeze_mask: stage_mask(kind, store, adapters)?, data, pad_id })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to the stage's conventional rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_factor")]
    pub divergence_factor: f64,
    #[serde(default = "default_patience")]
    pub divergence_patience: usize,
}

fn default_batch() -> usize {
    8
}
fn default_factor() -> f64 {
    10.0
}
fn default_patience() -> usize {
    100
}

impl Hyperparams {
    pub fn new(steps: usize) -> Self {
        Hyperparams {
            steps,
            batch_size: default_batch(),
            lr: None,
            schedule: Schedule::default(),
            adamw: AdamWConfig::default(),
            grad_clip: None,
            seed: 0,
            divergence_factor: default_factor(),
            divergence_patience: default_patience(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Cumulative predicted positions.
    pub tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,tokens\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.step, p.loss, p.lr, p.tokens);
        }
        s
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.loss)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    /// Mean loss of the last `n` points.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.points.len());
        (k > 0).then(|| self.points[self.points.len() - k..].iter().map(|p| p.loss).sum::<f64>() / k as f64)
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub curve: LossCurve,
    pub optimizer: AdamW,
}

/// Deterministic epoch-shuffled batch order.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { order: (0..n).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `hp.steps` optimizer steps on the stage's data, updating only the
/// names of its freeze mask. The recorded loss of each step is the batch
/// loss before that step's update.
pub fn train_stage(
    store: &mut ParameterStore,
    adapters: &mut AdapterSet,
    stage: &TrainingStage,
    hp: &Hyperparams,
) -> Result<StageOutcome, TrainError> {
    if stage.data.iter().all(|r| r.predicted_positions() == 0) {
        return Err(TrainError::Data(format!("stage {} has no training data", stage.kind.name())));
    }
    if hp.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let max = store.config().max_seq_len;
    if let Some((i, r)) = stage.data.iter().enumerate().find(|(_, r)| r.ids.len() > max) {
        return Err(TrainError::Data(format!("row {i} has {} tokens, the context holds {max}", r.ids.len())));
    }
    stage.freeze_mask.validate(store, adapters)?;
    let usable: Vec<&BatchRow> = stage.data.iter().filter(|r| r.predicted_positions() > 0).collect();
    let base_lr = hp.lr.unwrap_or_else(|| stage.kind.default_lr());
    let mut sampler = Sampler::new(usable.len(), hp.seed);
    let mut opt = AdamW::new(hp.adamw);
    let mut curve = LossCurve::default();
    let mut tokens = 0u64;
    let mut over = 0usize;
    for step in 0..hp.steps {
        let rows: Vec<BatchRow> = sampler.take(hp.batch_size).into_iter().map(|i| usable[i].clone()).collect();
        let batch = Batch::from_rows(&rows, stage.pad_id, stage.kind.name())?;
        let mut out = backward(store, adapters, &batch, &stage.freeze_mask)?;
        if let Some(c) = hp.grad_clip {
            clip_grad_norm(&mut out.grads, c);
        }
        let lr = hp.schedule.lr(base_lr, step, hp.steps);
        tokens += out.positions as u64;
        curve.points.push(CurvePoint { step, loss: out.loss, lr, tokens });
        let initial = curve.points[0].loss;
        if out.loss > hp.divergence_factor * initial {
            over += 1;
            if over >= hp.divergence_patience {
                return Err(TrainError::Diverged { step, initial, curve: Box::new(curve) });
            }
        } else {
            over = 0;
        }
        opt.step(store, adapters, &out.grads, &stage.freeze_mask, lr)?;
    }
    Ok(StageOutcome { curve, optimizer: opt })
}
