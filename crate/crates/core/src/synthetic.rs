//! Two toy languages with disjoint scripts and a shared grammar, so every
//! sentence has a word-for-word translation. Used to exercise the whole
//! adaptation pipeline at desk scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{SuiteEntry, TaskExample, TaskKind, TaskSpec, TaskSuite};
use crate::experiment::{
    BaseSpec, BilingualOptions, EvalConfig, ExperimentConfig, StageConfig, TokenizerSpec, Variant, VocabSpec,
    SCHEMA_VERSION,
};
use crate::model::{InitPolicy, LoraSpec, ModelConfig, Projection};
use crate::training::{Hyperparams, InstructionExample, MixtureSpec, StageKind};

const LATIN_SYLLABLES: [&str; 14] = ["ka", "lo", "mi", "ru", "te", "na", "so", "vi", "de", "pa", "ri", "gu", "ze", "bo"];
const ARABIC_LETTERS: [&str; 14] = ["ب", "ت", "د", "ر", "س", "ک", "ل", "م", "ن", "و", "ی", "ش", "ف", "ق"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    Base,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    Det(u8),
    Adj(u8),
    Animate(u8),
    Object(u8),
    Verb(u8),
    Prep(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSizes {
    pub dets: u8,
    pub adjs: u8,
    pub animates: u8,
    pub objects: u8,
    pub verbs: u8,
    pub preps: u8,
}

impl Default for GrammarSizes {
    fn default() -> Self {
        GrammarSizes { dets: 2, adjs: 6, animates: 6, objects: 8, verbs: 6, preps: 3 }
    }
}

/// Lexicons of both languages over one concept inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub sizes: GrammarSizes,
    concepts: Vec<Concept>,
    base: Vec<String>,
    new: Vec<String>,
}

fn unique_words(n: usize, rng: &mut ChaCha8Rng, alphabet: &[&str], min: usize, max: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(min..=max);
        let w: String = (0..len).map(|_| *alphabet.choose(rng).expect("alphabet")).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl LanguagePair {
    pub fn new(sizes: GrammarSizes, seed: u64) -> Self {
        let mut concepts = Vec::new();
        concepts.extend((0..sizes.dets).map(Concept::Det));
        concepts.extend((0..sizes.adjs).map(Concept::Adj));
        concepts.extend((0..sizes.animates).map(Concept::Animate));
        concepts.extend((0..sizes.objects).map(Concept::Object));
        concepts.extend((0..sizes.verbs).map(Concept::Verb));
        concepts.extend((0..sizes.preps).map(Concept::Prep));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = unique_words(concepts.len(), &mut rng, &LATIN_SYLLABLES, 2, 3);
        let new = unique_words(concepts.len(), &mut rng, &ARABIC_LETTERS, 3, 4);
        LanguagePair { sizes, concepts, base, new }
    }

    pub fn word(&self, lang: Lang, c: Concept) -> &str {
        let i = self.concepts.iter().position(|&x| x == c).expect("known concept");
        match lang {
            Lang::Base => &self.base[i],
            Lang::New => &self.new[i],
        }
    }

    pub fn lexicon(&self, lang: Lang) -> &[String] {
        match lang {
            Lang::Base => &self.base,
            Lang::New => &self.new,
        }
    }

    /// `Det [Adj] Animate Verb Det [Adj] Object [Prep Det Object]`. Each
    /// verb prefers a subset of objects, so the continuation depends on
    /// context.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<Concept> {
        let s = self.sizes;
        let mut out = Vec::with_capacity(12);
        let np = |out: &mut Vec<Concept>, rng: &mut dyn rand::RngCore, head: Concept| {
            out.push(Concept::Det(rng.random_range(0..s.dets)));
            if rng.random_bool(0.4) {
                out.push(Concept::Adj(rng.random_range(0..s.adjs)));
            }
            out.push(head);
        };
        let subject = rng.random_range(0..s.animates);
        np(&mut out, rng, Concept::Animate(subject));
        // subjects favour a band of verbs
        let verb = if rng.random_bool(0.8) { (subject + rng.random_range(0..2)) % s.verbs } else { rng.random_range(0..s.verbs) };
        out.push(Concept::Verb(verb));
        let object = if rng.random_bool(0.8) { (verb * 2 + rng.random_range(0..3)) % s.objects } else { rng.random_range(0..s.objects) };
        np(&mut out, rng, Concept::Object(object));
        if rng.random_bool(0.3) {
            out.push(Concept::Prep(rng.random_range(0..s.preps)));
            let o2 = rng.random_range(0..s.objects);
            np(&mut out, rng, Concept::Object(o2));
        }
        out
    }

    /// Words joined by spaces, closed by `.` (base) or `۔` (new) so the two
    /// languages share no symbol except the space.
    pub fn render(&self, lang: Lang, sentence: &[Concept]) -> String {
        let words: Vec<&str> = sentence.iter().map(|&c| self.word(lang, c)).collect();
        let stop = match lang {
            Lang::Base => '.',
            Lang::New => '\u{06D4}',
        };
        format!("{}{stop}", words.join(" "))
    }

    /// `n` sentences as `(base, new)` renderings of the same concepts.
    pub fn parallel(&self, n: usize, seed: u64) -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = self.sample(&mut rng);
                (self.render(Lang::Base, &s), self.render(Lang::New, &s))
            })
            .collect()
    }

    pub fn corpus(&self, lang: Lang, n: usize, seed: u64) -> Vec<String> {
        self.parallel(n, seed).into_iter().map(|(b, f)| if lang == Lang::Base { b } else { f }).collect()
    }

    /// Whether the subject of a sentence belongs to the first half of the
    /// animate inventory; a toy binary classification target.
    pub fn subject_class(&self, sentence: &[Concept]) -> bool {
        sentence.iter().find_map(|c| if let Concept::Animate(i) = c { Some(*i < self.sizes.animates / 2) } else { None }).unwrap_or(false)
    }
}

const TO_BASE: &str = "Translate to base.";
const TO_NEW: &str = "Translate to new.";
const GROUP: &str = "Group one? yes or no.";

/// Sizes and step counts of a generated toy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScale {
    pub train_sentences: usize,
    pub heldout_sentences: usize,
    pub parallel_pairs: usize,
    pub instruction_examples: usize,
    pub eval_examples: usize,
    pub tokenizer_size: usize,
    pub d_model: usize,
    pub base_steps: usize,
    pub mono_steps: usize,
    pub bilingual_steps: usize,
    pub lora_steps: usize,
    pub instruct_steps: usize,
    pub max_new_tokens: usize,
}

impl ToyScale {
    /// Two layers, width 64; a few minutes on one core.
    pub fn standard() -> Self {
        ToyScale {
            train_sentences: 2000,
            heldout_sentences: 100,
            parallel_pairs: 2000,
            instruction_examples: 400,
            eval_examples: 16,
            tokenizer_size: 330,
            d_model: 64,
            base_steps: 1000,
            mono_steps: 300,
            bilingual_steps: 600,
            lora_steps: 300,
            instruct_steps: 100,
            max_new_tokens: 24,
        }
    }

    /// Just enough to exercise every stage.
    pub fn smoke() -> Self {
        ToyScale {
            train_sentences: 200,
            heldout_sentences: 20,
            parallel_pairs: 100,
            instruction_examples: 40,
            eval_examples: 4,
            tokenizer_size: 300,
            d_model: 16,
            base_steps: 20,
            mono_steps: 5,
            bilingual_steps: 5,
            lora_steps: 5,
            instruct_steps: 5,
            max_new_tokens: 4,
        }
    }
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> io::Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let lines: Vec<String> = items.iter().map(|x| serde_json::to_string(x).expect("serializable")).collect();
    write_lines(path, &lines)
}

fn hp(steps: usize, lr: f64) -> Hyperparams {
    let mut h = Hyperparams::new(steps);
    h.lr = Some(lr);
    h
}

fn stage(data: &[&str], hyperparams: Hyperparams) -> StageConfig {
    StageConfig {
        data: data.iter().map(PathBuf::from).collect(),
        hyperparams,
        bilingual: BilingualOptions::default(),
        mixture: MixtureSpec::default(),
    }
}

impl LanguagePair {
    fn translation_examples(&self, n: usize, seed: u64) -> Vec<InstructionExample> {
        self.parallel(n, seed)
            .into_iter()
            .enumerate()
            .map(|(i, (b, f))| {
                let (instruction, input, output) =
                    if i % 2 == 0 { (TO_BASE, f, b) } else { (TO_NEW, b, f) };
                InstructionExample {
                    instruction: instruction.into(),
                    input,
                    output,
                    language: "new".into(),
                    task: "translation".into(),
                    is_translation: true,
                }
            })
            .collect()
    }

    fn group_examples(&self, lang: Lang, n: usize, seed: u64) -> Vec<(String, &'static str)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = self.sample(&mut rng);
                (self.render(lang, &s), if self.subject_class(&s) { "yes" } else { "no" })
            })
            .collect()
    }
}

/// Writes corpora, parallel data, instruction sets, an evaluation suite and
/// `experiment.json` (variant `fa_pretrained`, outputs under `out/`) into
/// `dir`. Returns the config path.
pub fn write_toy_experiment(dir: &Path, seed: u64, scale: &ToyScale) -> io::Result<PathBuf> {
    let data = dir.join("data");
    let tasks = dir.join("tasks");
    fs::create_dir_all(&data)?;
    fs::create_dir_all(&tasks)?;
    let pair = LanguagePair::new(GrammarSizes::default(), seed);
    let n = scale.train_sentences;
    write_lines(&data.join("base.txt"), &pair.corpus(Lang::Base, n, seed ^ 1))?;
    write_lines(&data.join("new.txt"), &pair.corpus(Lang::New, n, seed ^ 2))?;
    write_lines(&data.join("heldout_base.txt"), &pair.corpus(Lang::Base, scale.heldout_sentences, seed ^ 3))?;
    write_lines(&data.join("heldout_new.txt"), &pair.corpus(Lang::New, scale.heldout_sentences, seed ^ 4))?;
    let tsv: Vec<String> =
        pair.parallel(scale.parallel_pairs, seed ^ 5).into_iter().map(|(b, f)| format!("{f}\t{b}")).collect();
    write_lines(&data.join("parallel.tsv"), &tsv)?;

    write_jsonl(&data.join("translation.jsonl"), &pair.translation_examples(scale.instruction_examples, seed ^ 6))?;
    let group: Vec<InstructionExample> = pair
        .group_examples(Lang::New, scale.instruction_examples, seed ^ 7)
        .into_iter()
        .map(|(input, gold)| InstructionExample {
            instruction: GROUP.into(),
            input,
            output: gold.into(),
            language: "new".into(),
            task: "group".into(),
            is_translation: false,
        })
        .collect();
    write_jsonl(&data.join("group.jsonl"), &group)?;

    let labels = vec!["yes".to_string(), "no".to_string()];
    let mut entries = Vec::new();
    for (lang, name, seen, s) in [(Lang::New, "group_new", true, 8u64), (Lang::Base, "group_base", false, 9)] {
        let examples: Vec<TaskExample> = pair
            .group_examples(lang, scale.eval_examples, seed ^ s)
            .into_iter()
            .map(|(input, gold)| TaskExample { instruction: GROUP.into(), input, labels: None, gold: gold.into() })
            .collect();
        write_jsonl(&tasks.join(format!("{name}.jsonl")), &examples)?;
        let language = if lang == Lang::New { "new" } else { "base" };
        entries.push(SuiteEntry {
            spec: TaskSpec {
                name: name.into(),
                kind: TaskKind::Classification,
                labels: labels.clone(),
                language: language.into(),
                template: "default".into(),
                seen_in_training: seen,
            },
            data: PathBuf::from(format!("{name}.jsonl")),
        });
    }
    let translation: Vec<TaskExample> = pair
        .parallel(scale.eval_examples, seed ^ 10)
        .into_iter()
        .map(|(b, f)| TaskExample { instruction: TO_BASE.into(), input: f, labels: None, gold: b })
        .collect();
    write_jsonl(&tasks.join("translation_new_base.jsonl"), &translation)?;
    entries.push(SuiteEntry {
        spec: TaskSpec {
            name: "translation_new_base".into(),
            kind: TaskKind::Generation,
            labels: Vec::new(),
            language: "new".into(),
            template: "default".into(),
            seen_in_training: true,
        },
        data: PathBuf::from("translation_new_base.jsonl"),
    });
    let suite = TaskSuite { tasks: entries };
    fs::write(tasks.join("suite.json"), serde_json::to_string_pretty(&suite).expect("serializable") + "\n")?;

    let d = scale.d_model;
    let model = ModelConfig {
        n_layers: 2,
        d_model: d,
        n_heads: 4,
        d_ffn: 2 * d,
        vocab_size: 0,
        max_seq_len: 128,
        rotary_base: 10_000.0,
        norm_eps: 1e-5,
    };
    let tokenizer = |file: &str| TokenizerSpec {
        corpus: vec![PathBuf::from(file)],
        target_size: scale.tokenizer_size,
        sample_bytes: None,
    };
    let mut stages = BTreeMap::new();
    stages.insert(StageKind::EmbedAlignMono, stage(&["data/new.txt"], hp(scale.mono_steps, 1e-4)));
    stages.insert(StageKind::EmbedAlignBilingual, stage(&["data/parallel.tsv"], hp(scale.bilingual_steps, 3e-4)));
    stages.insert(StageKind::LoraPretrain, stage(&["data/new.txt"], hp(scale.lora_steps, 1e-3)));
    stages.insert(
        StageKind::InstructTune,
        stage(&["data/translation.jsonl", "data/group.jsonl"], hp(scale.instruct_steps, 1e-3)),
    );
    let cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "toy".into(),
        seed,
        output_dir: PathBuf::from("out"),
        base: BaseSpec::Pretrain {
            model,
            tokenizer: tokenizer("data/base.txt"),
            stage: stage(&["data/base.txt"], hp(scale.base_steps, 3e-3)),
        },
        variant: Some(Variant::FaPretrained),
        vocab: Some(VocabSpec { tokenizer: tokenizer("data/new.txt"), init_policy: InitPolicy::default() }),
        lora: LoraSpec { rank: 4, alpha: 16.0, projections: Projection::ALL.to_vec() },
        reattach_lora_for_instruct: false,
        instruct_with_lora: false,
        stages,
        heldout: [("base", "data/heldout_base.txt"), ("new", "data/heldout_new.txt")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
            .collect(),
        pack_len: Some(64),
        eval: Some(EvalConfig { tasks: PathBuf::from("tasks/suite.json"), max_new_tokens: scale.max_new_tokens }),
        root: PathBuf::new(),
    };
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).expect("serializable") + "\n")?;
    Ok(path)
}
