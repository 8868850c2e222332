use serde::{Deserialize, Serialize};

use super::{LoraSpec, ModelConfig};

/// Training phase for the purpose of counting trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingStage {
    Alignment,
    LoraPretrain,
    Instruct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: u64,
    pub trainable: u64,
    /// `100 · trainable / total`
    pub percentage: f64,
}

/// Parameters of the base decoder without adapters.
pub fn base_parameter_count(cfg: &ModelConfig) -> u64 {
    let (v, d, f, l) = (cfg.vocab_size as u64, cfg.d_model as u64, cfg.d_ffn as u64, cfg.n_layers as u64);
    let per_layer = 4 * d * d + 3 * f * d + 2 * d;
    2 * v * d + l * per_layer + d
}

/// Total and trainable parameter counts for a stage. Embedding and head are
/// trained in every stage; adapters exist (and train) in the LoRA stages and
/// in instruction tuning when a spec is given.
pub fn count_parameters(cfg: &ModelConfig, stage: AccountingStage, lora: Option<&LoraSpec>) -> ParameterCount {
    let base = base_parameter_count(cfg);
    let embed_head = 2 * cfg.vocab_size as u64 * cfg.d_model as u64;
    let adapters = match stage {
        AccountingStage::Alignment => 0,
        AccountingStage::LoraPretrain | AccountingStage::Instruct => lora.map_or(0, |s| s.num_parameters(cfg)),
    };
    let total = base + adapters;
    let trainable = embed_head + adapters;
    ParameterCount { total, trainable, percentage: 100.0 * trainable as f64 / total as f64 }
}
