use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{forward, AdapterSet, ParameterStore};
use crate::tokenizer::{Codec, Vocabulary, BOS, EOS};
use crate::training::PromptIds;

use super::metrics::{accuracy, bleu};
use super::normalize::parse_label;
use super::task::{random_baseline_examples, TaskData, TaskExample, TaskKind, TaskSpec};
use super::EvalError;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub task: &'a TaskSpec,
    pub example: &'a TaskExample,
    pub labels: &'a [String],
    pub example_index: usize,
    pub max_new_tokens: usize,
}

pub trait Generator: Sync {
    fn name(&self) -> String;
    fn generate(&self, req: &GenerationRequest) -> Result<String, String>;
}

/// Greedy decoding from a model prompted with the instruction template.
pub struct ModelGenerator<'a> {
    pub store: &'a ParameterStore,
    pub adapters: &'a AdapterSet,
    pub vocab: &'a Vocabulary,
}

impl ModelGenerator<'_> {
    /// Greedy continuation of `ids`; ties go to the lowest id.
    pub fn greedy(&self, mut ids: Vec<u32>, max_new: usize, stop: Option<u32>) -> Result<Vec<u32>, String> {
        let max_len = self.store.config().max_seq_len;
        let start = ids.len();
        while ids.len() - start < max_new && ids.len() < max_len {
            let logits = forward(self.store, self.adapters, std::slice::from_ref(&ids)).map_err(|e| e.to_string())?;
            let last = logits.at(0, ids.len() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let next = best as u32;
            if Some(next) == stop {
                break;
            }
            ids.push(next);
        }
        Ok(ids[start..].to_vec())
    }
}

impl Generator for ModelGenerator<'_> {
    fn name(&self) -> String {
        "model".into()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, String> {
        let codec = Codec::new(self.vocab);
        let bos = self.vocab.special_id(BOS).map_err(|e| e.to_string())?;
        let eos = self.vocab.special_id(EOS).map_err(|e| e.to_string())?;
        let mut prompt =
            PromptIds::encode(&codec, &req.example.instruction, &req.example.input).map_err(|e| e.to_string())?;
        let max_len = self.store.config().max_seq_len;
        let room = req.max_new_tokens.min(max_len / 2).max(1);
        prompt
            .shrink_to(max_len.saturating_sub(1 + room))
            .ok_or_else(|| "prompt template does not fit in the context".to_string())?;
        let mut ids = vec![bos];
        ids.extend(prompt.ids());
        let out = self.greedy(ids, req.max_new_tokens, Some(eos))?;
        codec.decode_skip_special(&out).map_err(|e| e.to_string())
    }
}

/// Answers every classification example with a uniformly drawn label,
/// seeded per task and example so results do not depend on scheduling.
pub struct RandomGenerator {
    pub seed: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Generator for RandomGenerator {
    fn name(&self) -> String {
        format!("random(seed={})", self.seed)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, String> {
        if req.labels.is_empty() {
            return Ok(String::new());
        }
        let task_key = req.task.name.bytes().chain(req.task.language.bytes()).fold(0u64, |h, b| mix(h ^ b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ task_key) ^ req.example_index as u64);
        Ok(req.labels[rng.random_range(0..req.labels.len())].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub index: usize,
    pub raw: String,
    /// Parsed label; `None` with `refusal` set when nothing parsed.
    pub parsed: Option<String>,
    pub refusal: bool,
    pub correct: Option<bool>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub language: String,
    pub kind: TaskKind,
    pub metric: String,
    pub score: f64,
    pub examples: usize,
    pub refusals: usize,
    pub seen_in_training: bool,
    pub random: Option<f64>,
    pub predictions: Vec<ExampleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSummary {
    pub language: String,
    pub avg_classification: Option<f64>,
    pub avg_generation: Option<f64>,
    pub random_classification: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generator: String,
    pub checkpoint: Option<String>,
    pub lineage: Vec<String>,
    pub lineage_head: Option<String>,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub languages: Vec<LanguageSummary>,
    pub avg_classification: Option<f64>,
    pub avg_generation: Option<f64>,
    pub refusals: usize,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { max_new_tokens: DEFAULT_MAX_NEW_TOKENS }
    }
}

/// Scores one classification generation. Decoder failures become
/// refusals carrying the error text.
pub fn classify_by_generation(
    generator: &dyn Generator,
    req: &GenerationRequest,
) -> Result<ExampleResult, EvalError> {
    if req.labels.is_empty() {
        return Err(EvalError::Invalid(format!("task `{}` example {} has no labels", req.task.name, req.example_index)));
    }
    let (raw, diagnostic) = match generator.generate(req) {
        Ok(s) => (s, None),
        Err(e) => (String::new(), Some(e)),
    };
    let echoes = [req.example.instruction.as_str(), req.example.input.as_str()];
    let parsed = parse_label(&raw, req.labels, &echoes).map(|i| req.labels[i].clone());
    let correct = Some(parsed.as_deref() == Some(req.example.gold.as_str()));
    Ok(ExampleResult { index: req.example_index, refusal: parsed.is_none(), raw, parsed, correct, diagnostic })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn run_task(generator: &dyn Generator, task: &TaskData, opts: &EvalOptions) -> Result<TaskResult, EvalError> {
    let spec = &task.spec;
    spec.validate()?;
    if task.examples.is_empty() {
        return Err(EvalError::Invalid(format!("task `{}` has no examples", spec.name)));
    }
    let results: Vec<ExampleResult> = task
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let req = GenerationRequest {
                task: spec,
                example: ex,
                labels: spec.labels_for(ex),
                example_index: i,
                max_new_tokens: opts.max_new_tokens,
            };
            match spec.kind {
                TaskKind::Classification => classify_by_generation(generator, &req),
                TaskKind::Generation => {
                    let (raw, diagnostic) = match generator.generate(&req) {
                        Ok(s) => (s, None),
                        Err(e) => (String::new(), Some(e)),
                    };
                    Ok(ExampleResult { index: i, raw, parsed: None, refusal: false, correct: None, diagnostic })
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let (metric, score, random) = match spec.kind {
        TaskKind::Classification => {
            let preds: Vec<Option<&str>> = results.iter().map(|r| r.parsed.as_deref()).collect();
            let golds: Vec<&str> = task.examples.iter().map(|e| e.gold.as_str()).collect();
            ("accuracy", accuracy(&preds, &golds)?, Some(random_baseline_examples(spec, &task.examples)?))
        }
        TaskKind::Generation => {
            let hyps: Vec<&str> = results.iter().map(|r| r.raw.as_str()).collect();
            let refs: Vec<&str> = task.examples.iter().map(|e| e.gold.as_str()).collect();
            ("bleu", bleu(&hyps, &refs)?, None)
        }
    };
    Ok(TaskResult {
        name: spec.name.clone(),
        language: spec.language.clone(),
        kind: spec.kind,
        metric: metric.into(),
        score,
        examples: results.len(),
        refusals: results.iter().filter(|r| r.refusal).count(),
        seen_in_training: spec.seen_in_training,
        random,
        predictions: results,
    })
}

/// Runs every task and aggregates. Averages are plain means of task scores,
/// per language and overall.
pub fn run_eval(
    generator: &dyn Generator,
    suite: &[TaskData],
    opts: &EvalOptions,
    mut metadata: ReportMetadata,
) -> Result<EvalReport, EvalError> {
    if suite.is_empty() {
        return Err(EvalError::Invalid("no tasks to evaluate".into()));
    }
    let tasks: Vec<TaskResult> = suite.iter().map(|t| run_task(generator, t, opts)).collect::<Result<_, _>>()?;
    let scores = |kind: TaskKind, lang: Option<&str>| -> Vec<f64> {
        tasks
            .iter()
            .filter(|t| t.kind == kind && lang.is_none_or(|l| t.language == l))
            .map(|t| t.score)
            .collect()
    };
    let mut langs: Vec<String> = Vec::new();
    for t in &tasks {
        if !langs.contains(&t.language) {
            langs.push(t.language.clone());
        }
    }
    let languages = langs
        .iter()
        .map(|l| LanguageSummary {
            language: l.clone(),
            avg_classification: mean(&scores(TaskKind::Classification, Some(l))),
            avg_generation: mean(&scores(TaskKind::Generation, Some(l))),
            random_classification: mean(
                &tasks.iter().filter(|t| &t.language == l).filter_map(|t| t.random).collect::<Vec<_>>(),
            ),
        })
        .collect();
    if metadata.generator.is_empty() {
        metadata.generator = generator.name();
    }
    if tasks.iter().any(|t| t.kind == TaskKind::Generation) {
        let note = "generation tasks, summarization included, are scored with corpus BLEU-4".to_string();
        if !metadata.notes.contains(&note) {
            metadata.notes.push(note);
        }
    }
    Ok(EvalReport {
        avg_classification: mean(&scores(TaskKind::Classification, None)),
        avg_generation: mean(&scores(TaskKind::Generation, None)),
        refusals: tasks.iter().map(|t| t.refusals).sum(),
        languages,
        tasks,
        metadata,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Tasks as rows and, for each language, a Random and a model column.
    /// Starred tasks were not seen during training.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, bool)> = Vec::new();
        for t in &self.tasks {
            if !rows.iter().any(|r| r.0 == t.name) {
                rows.push((t.name.clone(), t.seen_in_training));
            }
        }
        let mut by_key: BTreeMap<(&str, &str), &TaskResult> = BTreeMap::new();
        for t in &self.tasks {
            by_key.insert((t.name.as_str(), t.language.as_str()), t);
        }
        let model = if self.metadata.generator.is_empty() { "Model" } else { self.metadata.generator.as_str() };
        let label_w = rows.iter().map(|r| r.0.chars().count() + 1).chain([18]).max().unwrap_or(18);
        let col_w = model.chars().count().max(8);
        let mut out = String::new();
        let _ = write!(out, "{:label_w$}", "");
        for l in &self.languages {
            let _ = write!(out, " | {:^w$}", l.language, w = 8 + 1 + col_w);
        }
        out.push('\n');
        let _ = write!(out, "{:label_w$}", "");
        for _ in &self.languages {
            let _ = write!(out, " | {:>8} {:>col_w$}", "Random", model);
        }
        out.push('\n');
        let rule = "-".repeat(label_w + self.languages.len() * (3 + 9 + col_w));
        let _ = writeln!(out, "{rule}");
        for (name, seen) in &rows {
            let label = if *seen { name.clone() } else { format!("*{name}") };
            let _ = write!(out, "{label:label_w$}");
            for l in &self.languages {
                let t = by_key.get(&(name.as_str(), l.language.as_str()));
                let _ = write!(out, " | {:>8} {:>col_w$}", cell(t.and_then(|t| t.random)), cell(t.map(|t| t.score)));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{rule}");
        let _ = write!(out, "{:label_w$}", "Avg.Classification");
        for l in &self.languages {
            let _ = write!(out, " | {:>8} {:>col_w$}", cell(l.random_classification), cell(l.avg_classification));
        }
        out.push('\n');
        let _ = write!(out, "{:label_w$}", "Avg.Generation");
        for l in &self.languages {
            let _ = write!(out, " | {:>8} {:>col_w$}", "-", cell(l.avg_generation));
        }
        out.push('\n');
        out
    }
}
