use serde::{Deserialize, Serialize};

use crate::training::StageKind;

/// The four evaluated models, each a fixed subset of the adaptation stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Base vocabulary, instruction tuning through LoRA adapters.
    Llama2,
    /// Base vocabulary, instruction tuning of embeddings and head only.
    Llama2NoLora,
    /// Expanded vocabulary, both alignment steps, instruction tuning without
    /// adapters.
    EmAligned,
    /// Em-aligned plus LoRA pretraining; instruction tuning reuses the
    /// pretrained adapters.
    FaPretrained,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Llama2, Variant::Llama2NoLora, Variant::EmAligned, Variant::FaPretrained];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Llama2 => "llama2",
            Variant::Llama2NoLora => "llama2_no_lora",
            Variant::EmAligned => "em_aligned",
            Variant::FaPretrained => "fa_pretrained",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn stages(self) -> &'static [StageKind] {
        use StageKind::*;
        match self {
            Variant::Llama2 | Variant::Llama2NoLora => &[InstructTune],
            Variant::EmAligned => &[EmbedAlignMono, EmbedAlignBilingual, InstructTune],
            Variant::FaPretrained => &[EmbedAlignMono, EmbedAlignBilingual, LoraPretrain, InstructTune],
        }
    }

    pub fn expands_vocabulary(self) -> bool {
        matches!(self, Variant::EmAligned | Variant::FaPretrained)
    }

    pub fn instruct_with_lora(self) -> bool {
        matches!(self, Variant::Llama2 | Variant::FaPretrained)
    }
}
