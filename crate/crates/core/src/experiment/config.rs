use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Variant};
use crate::model::{InitPolicy, LoraSpec, ModelConfig};
use crate::training::{BilingualLoss, Direction, Hyperparams, MixtureSpec, StageKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Order of the two halves in bilingual rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionPolicy {
    #[default]
    NewToBase,
    BaseToNew,
    /// Even pairs new-to-base, odd pairs base-to-new.
    Alternate,
}

impl DirectionPolicy {
    pub fn for_pair(self, index: usize) -> Direction {
        match self {
            DirectionPolicy::NewToBase => Direction::NewToBase,
            DirectionPolicy::BaseToNew => Direction::BaseToNew,
            DirectionPolicy::Alternate if index % 2 == 0 => Direction::NewToBase,
            DirectionPolicy::Alternate => Direction::BaseToNew,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilingualOptions {
    #[serde(default)]
    pub direction: DirectionPolicy,
    #[serde(default)]
    pub loss: BilingualLoss,
    /// Monolingual corpora packed and mixed into the bilingual rows.
    #[serde(default)]
    pub interleave: Vec<PathBuf>,
}

/// Data and optimizer settings of one stage. `data` holds text corpora
/// (one sentence per line) for pretraining stages, parallel TSV files
/// (new-language source, base-language target) for the bilingual stage and
/// instruction JSON-lines files for instruction tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub data: Vec<PathBuf>,
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub bilingual: BilingualOptions,
    #[serde(default)]
    pub mixture: MixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub corpus: Vec<PathBuf>,
    pub target_size: usize,
    #[serde(default)]
    pub sample_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSpec {
    /// Start from a saved checkpoint that carries its vocabulary.
    Checkpoint { path: PathBuf },
    /// Train a base tokenizer and model from scratch. The model's
    /// `vocab_size` is replaced by the size of the trained vocabulary.
    Pretrain { model: ModelConfig, tokenizer: TokenizerSpec, stage: StageConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub init_policy: InitPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: PathBuf,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
}

fn default_max_new() -> usize {
    crate::eval::DEFAULT_MAX_NEW_TOKENS
}

/// One experiment: a base model, an optional vocabulary expansion and the
/// adaptation stages to run on top of it. Relative paths resolve against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub base: BaseSpec,
    /// Selects a subset of `stages`. Without it every configured stage runs.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub vocab: Option<VocabSpec>,
    #[serde(default)]
    pub lora: LoraSpec,
    /// Attach fresh adapters for instruction tuning instead of reusing the
    /// ones trained during LoRA pretraining.
    #[serde(default)]
    pub reattach_lora_for_instruct: bool,
    /// Train instruction tuning with adapters even when no LoRA stage ran.
    #[serde(default)]
    pub instruct_with_lora: bool,
    #[serde(default)]
    pub stages: BTreeMap<StageKind, StageConfig>,
    /// Held-out text per language, scored after every step.
    #[serde(default)]
    pub heldout: BTreeMap<String, PathBuf>,
    /// Row length for packed monolingual data and held-out scoring;
    /// defaults to the model's context length.
    #[serde(default)]
    pub pack_len: Option<usize>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// What a run will do, resolved from the config and the variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub expand_vocabulary: bool,
    pub stages: Vec<StageKind>,
    /// Stage before which adapters are attached.
    pub attach_lora_before: Option<StageKind>,
    pub reattach_for_instruct: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, root: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("experiment config: {e}")))?;
        cfg.root = root.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &root)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn plan(&self) -> Result<Plan, ExperimentError> {
        let stages: Vec<StageKind> = match self.variant {
            Some(v) => v.stages().to_vec(),
            None => self.stages.keys().copied().collect(),
        };
        for k in &stages {
            if !self.stages.contains_key(k) {
                return Err(ExperimentError::Config(format!("stage `{}` has no configuration", k.name())));
            }
            if *k == StageKind::BasePretrain {
                return Err(ExperimentError::Config("base pretraining is configured under `base`".into()));
            }
        }
        let expand_vocabulary = match self.variant {
            Some(v) => v.expands_vocabulary(),
            None => self.vocab.is_some(),
        };
        if expand_vocabulary && self.vocab.is_none() {
            return Err(ExperimentError::Config("vocabulary expansion needs a `vocab` section".into()));
        }
        if stages.contains(&StageKind::EmbedAlignBilingual) && !expand_vocabulary {
            return Err(ExperimentError::Config("bilingual alignment needs an expanded vocabulary".into()));
        }
        let instruct_lora = match self.variant {
            Some(v) => v.instruct_with_lora(),
            None => self.instruct_with_lora,
        };
        let attach_lora_before = if stages.contains(&StageKind::LoraPretrain) {
            Some(StageKind::LoraPretrain)
        } else if instruct_lora && stages.contains(&StageKind::InstructTune) {
            Some(StageKind::InstructTune)
        } else {
            None
        };
        Ok(Plan {
            expand_vocabulary,
            stages,
            attach_lora_before,
            reattach_for_instruct: self.reattach_lora_for_instruct,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.trim().is_empty() {
            return Err(ExperimentError::Config("experiment name is empty".into()));
        }
        if let BaseSpec::Pretrain { model, tokenizer, stage } = &self.base {
            let mut m = model.clone();
            m.vocab_size = tokenizer.target_size.max(2);
            m.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            check_tokenizer(tokenizer)?;
            check_stage("base", stage)?;
        }
        if let Some(v) = &self.vocab {
            check_tokenizer(&v.tokenizer)?;
        }
        if self.pack_len == Some(0) {
            return Err(ExperimentError::Config("pack_len must be positive".into()));
        }
        if self.lora.rank == 0 {
            return Err(ExperimentError::Config("lora.rank must be positive".into()));
        }
        for (k, s) in &self.stages {
            check_stage(k.name(), s)?;
        }
        self.plan()?;
        Ok(())
    }

    /// Every input file the config names, for existence checks.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        match &self.base {
            BaseSpec::Checkpoint { path } => out.push(path.clone()),
            BaseSpec::Pretrain { tokenizer, stage, .. } => {
                out.extend(tokenizer.corpus.iter().cloned());
                out.extend(stage.data.iter().cloned());
            }
        }
        if let Some(v) = &self.vocab {
            out.extend(v.tokenizer.corpus.iter().cloned());
        }
        for s in self.stages.values() {
            out.extend(s.data.iter().cloned());
            out.extend(s.bilingual.interleave.iter().cloned());
        }
        out.extend(self.heldout.values().cloned());
        if let Some(e) = &self.eval {
            out.push(e.tasks.clone());
        }
        out.into_iter().map(|p| self.resolve(&p)).collect()
    }

    pub fn check_inputs(&self) -> Result<(), ExperimentError> {
        for p in self.inputs() {
            if !p.exists() {
                return Err(ExperimentError::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn check_tokenizer(t: &TokenizerSpec) -> Result<(), ExperimentError> {
    if t.corpus.is_empty() {
        return Err(ExperimentError::Config("tokenizer corpus list is empty".into()));
    }
    if t.target_size == 0 {
        return Err(ExperimentError::Config("tokenizer target_size must be positive".into()));
    }
    Ok(())
}

fn check_stage(name: &str, s: &StageConfig) -> Result<(), ExperimentError> {
    if s.data.is_empty() {
        return Err(ExperimentError::Config(format!("stage `{name}` lists no data files")));
    }
    if s.hyperparams.steps == 0 || s.hyperparams.batch_size == 0 {
        return Err(ExperimentError::Config(format!("stage `{name}` needs positive steps and batch_size")));
    }
    Ok(())
}

/// Settings for running stages one at a time on an existing checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub stages: BTreeMap<StageKind, StageConfig>,
    /// Grows the resumed checkpoint to this merged vocabulary (TSV) first.
    #[serde(default)]
    pub expand_to: Option<PathBuf>,
    #[serde(default)]
    pub init_policy: InitPolicy,
    /// Adapters to attach when the checkpoint carries none. Required for
    /// LoRA pretraining only if the default spec is not wanted; instruction
    /// tuning attaches adapters only when this is set.
    #[serde(default)]
    pub lora: Option<LoraSpec>,
    #[serde(default)]
    pub reattach_lora: bool,
    #[serde(default)]
    pub heldout: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub pack_len: Option<usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl StageRunConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: StageRunConfig =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        for (k, s) in &cfg.stages {
            check_stage(k.name(), s)?;
        }
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}
