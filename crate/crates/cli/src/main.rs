//! `graft`: command-line front end for the adaptation pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 stage failure,
//! 3 verification mismatch.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use graft_core::checkpoint::{verify_checkpoint, Checkpoint, TensorStatus};
use graft_core::corpus::{clean_file, CleaningConfig, CorpusError, NgramProfile};
use graft_core::eval::DEFAULT_MAX_NEW_TOKENS;
use graft_core::experiment::{
    evaluate_checkpoint, read_lines, run_experiment, run_stages, ExperimentConfig, ExperimentError, StageRunConfig,
};
use graft_core::model::{count_parameters, AccountingStage, LoraSpec, ModelConfig, Role};
use graft_core::synthetic::{write_toy_experiment, ToyScale};
use graft_core::tokenizer::{merge_vocabularies, train_subword, TrainerConfig, Vocabulary, SEP};
use graft_core::training::StageKind;

#[derive(Parser)]
#[command(name = "graft", version, about = "Graft a new language onto a small causal language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, filter and deduplicate a JSON-lines document file.
    Clean {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cleaning config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Language profile (JSON); defaults to the built-in Persian profile.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Train a byte-fallback BPE vocabulary on text corpora.
    TrainTokenizer {
        /// Corpus files, one sentence per line.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        /// Output vocabulary (TSV).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sample_bytes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Append a new vocabulary to a base one and report the overlap.
    MergeVocab {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Do not reserve the `<sep>` token after merging.
        #[arg(long)]
        no_sep: bool,
    },
    /// Total and trainable parameter counts for a stage.
    CountParams {
        /// Model config (JSON), optionally wrapped as {"model": ..., "lora": ...}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: CountStage,
    },
    /// Monolingual then bilingual embedding alignment.
    PretrainAlign(StageArgs),
    /// LoRA pretraining.
    PretrainLora(StageArgs),
    /// Instruction tuning.
    InstructTune(StageArgs),
    /// Evaluate a checkpoint on a task suite.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task suite (JSON).
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// Run a whole experiment from one config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two checkpoints tensor by tensor.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Tensors expected to differ (comma separated); `adapters` stands
        /// for every adapter tensor. Without it the checkpoints must match.
        #[arg(long, value_delimiter = ',')]
        expect_changed: Option<Vec<String>>,
        /// Print the diff as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic two-language experiment.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Scale::Standard)]
        scale: Scale,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    /// Stage config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountStage {
    Alignment,
    LoraPretrain,
    Instruct,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Standard,
    Smoke,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn config_err(e: impl Display) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

fn stage_err(e: impl Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| stage_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| stage_err(format!("{}: {e}", path.display())))
}

fn read_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Vocabulary::from_tsv(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn clean(input: &Path, out: &Path, config: &Path, stats: Option<&Path>, profile: Option<&Path>) -> Result<(), Failure> {
    let cfg: CleaningConfig = read_json(config)?;
    cfg.validate().map_err(config_err)?;
    let profile = match profile {
        Some(p) => read_json(p)?,
        None => NgramProfile::persian_default(),
    };
    if !input.is_file() {
        return Err(config_err(format!("{}: no such input file", input.display())));
    }
    match clean_file(input, out, stats, &cfg, &profile) {
        Ok(s) => {
            println!("kept {} of {} sentences from {} documents", s.kept, s.sentences, s.documents);
            Ok(())
        }
        Err(abort) => {
            let code = if matches!(abort.error, CorpusError::Config(_)) { 1 } else { 2 };
            Err(Failure { code, message: abort.error.to_string() })
        }
    }
}

fn train_tokenizer(corpus: &[PathBuf], size: usize, out: &Path, sample_bytes: Option<usize>, seed: u64) -> Result<(), Failure> {
    let mut lines = Vec::new();
    for p in corpus {
        lines.extend(read_lines(p)?);
    }
    let mut cfg = TrainerConfig::new(size);
    cfg.sample_bytes = sample_bytes;
    cfg.seed = seed;
    let outcome = train_subword(&lines, &cfg).map_err(stage_err)?;
    write_file(out, outcome.vocab.to_tsv())?;
    println!(
        "{} tokens ({} alphabet, {} merges){}",
        outcome.vocab.len(),
        outcome.alphabet_size,
        outcome.merges,
        if outcome.reached_target { "" } else { "; corpus exhausted before the target size" }
    );
    Ok(())
}

#[derive(Serialize)]
struct MergeOutput<'a> {
    #[serde(flatten)]
    merge: &'a graft_core::tokenizer::MergeReport,
    reserved: Vec<String>,
    final_size: usize,
}

fn merge_vocab(base: &Path, new: &Path, out: &Path, report: &Path, no_sep: bool) -> Result<(), Failure> {
    let (merged, r) = merge_vocabularies(&read_vocab(base)?, &read_vocab(new)?);
    let (merged, reserved) = if no_sep {
        (merged, Vec::new())
    } else {
        let (v, added) = merged.with_reserved(&[SEP]);
        (v, if added > 0 { vec![SEP.to_string()] } else { Vec::new() })
    };
    write_file(out, merged.to_tsv())?;
    write_file(report, pretty(&MergeOutput { merge: &r, reserved, final_size: merged.len() }))?;
    println!("{} + {} - {} = {} (final {})", r.base_size, r.new_size, r.overlap_count, r.merged_size, merged.len());
    Ok(())
}

fn default_lora() -> Option<LoraSpec> {
    Some(LoraSpec::default())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CountConfig {
    model: ModelConfig,
    #[serde(default = "default_lora")]
    lora: Option<LoraSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CountInput {
    Wrapped(CountConfig),
    Bare(ModelConfig),
}

fn count_params(config: &Path, stage: CountStage) -> Result<(), Failure> {
    let (model, lora) = match read_json::<CountInput>(config)? {
        CountInput::Wrapped(c) => (c.model, c.lora),
        CountInput::Bare(m) => (m, default_lora()),
    };
    model.validate().map_err(config_err)?;
    let stage = match stage {
        CountStage::Alignment => AccountingStage::Alignment,
        CountStage::LoraPretrain => AccountingStage::LoraPretrain,
        CountStage::Instruct => AccountingStage::Instruct,
    };
    let c = count_parameters(&model, stage, lora.as_ref());
    println!("trainable {}", c.trainable);
    println!("total {}", c.total);
    println!("percentage {:.2}", c.percentage);
    Ok(())
}

#[derive(Serialize)]
struct StageRunSummary<'a> {
    stages: &'a [graft_core::experiment::StageRecord],
    perplexity: &'a [graft_core::experiment::PerplexityPoint],
    final_checkpoint: String,
    lineage: Vec<&'a str>,
}

fn stages(args: &StageArgs, kinds: &[StageKind]) -> Result<(), Failure> {
    let cfg = StageRunConfig::load(&args.config)?;
    let outcome = run_stages(&cfg, kinds, &args.resume, args.seed)?;
    for r in &outcome.records {
        println!(
            "{}: {} steps, loss {} -> {}, saved {}",
            r.stage,
            r.steps,
            r.first_loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.last_loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.checkpoint
        );
    }
    let summary = StageRunSummary {
        stages: &outcome.records,
        perplexity: &outcome.perplexity,
        final_checkpoint: outcome.final_checkpoint.display().to_string(),
        lineage: outcome.checkpoint.lineage.stages(),
    };
    let out = cfg.resolve(&cfg.output_dir);
    let name = kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+");
    write_file(&out.join(format!("{name}.summary.json")), pretty(&summary))?;
    Ok(())
}

fn evaluate(checkpoint: &Path, tasks: &Path, out: &Path, max_new_tokens: usize) -> Result<(), Failure> {
    let report = evaluate_checkpoint(checkpoint, tasks, out, max_new_tokens)?;
    print!("{}", report.render_table());
    Ok(())
}

fn run(config: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let outcome = run_experiment(&cfg)?;
    let s = &outcome.summary;
    println!("lineage: {}", s.lineage.join(" -> "));
    for p in &s.perplexity {
        let vals: Vec<String> = p.values.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
        println!("perplexity at {}: {}", p.point, vals.join(", "));
    }
    if let Some(r) = &outcome.report {
        print!("{}", r.render_table());
    }
    println!("final checkpoint: {}", cfg.output_path().join(&s.final_checkpoint).display());
    Ok(())
}

/// Expands `adapters` to every adapter tensor present in either checkpoint.
fn expected_set(names: &[String], a: &Checkpoint, b: &Checkpoint) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for n in names {
        if n == "adapters" {
            for c in [a, b] {
                let adapters = c.tensors().into_iter().filter(|(_, role, _)| matches!(role, Role::LoraA | Role::LoraB));
                out.extend(adapters.map(|(name, _, _)| name));
            }
        } else {
            out.insert(n.clone());
        }
    }
    out
}

fn verify(a: &Path, b: &Path, expect: Option<&[String]>, json: bool) -> Result<(), Failure> {
    let load = |p: &Path| Checkpoint::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())));
    let (ca, cb) = (load(a)?, load(b)?);
    let mismatch = |m: String| Failure { code: 3, message: m };
    for (p, c) in [(a, &ca), (b, &cb)] {
        c.lineage.verify().map_err(|e| mismatch(format!("{}: {e}", p.display())))?;
    }
    let diff = verify_checkpoint(&ca, &cb).map_err(|e| mismatch(e.to_string()))?;
    if json {
        print!("{}", pretty(&diff));
    } else {
        for t in diff.tensors.iter().filter(|t| t.status != TensorStatus::Equal) {
            match t.max_abs_diff {
                Some(d) => println!("{:?} {} (max abs diff {d:e})", t.status, t.name),
                None => println!("{:?} {}", t.status, t.name),
            }
        }
        let equal = diff.tensors.iter().filter(|t| t.status == TensorStatus::Equal).count();
        println!("{equal} of {} tensors bitwise equal", diff.tensors.len());
    }
    let changed: BTreeSet<String> = diff.changed().into_iter().map(String::from).collect();
    let expected = expected_set(expect.unwrap_or(&[]), &ca, &cb);
    if changed != expected {
        let extra: Vec<&String> = changed.difference(&expected).collect();
        let missing: Vec<&String> = expected.difference(&changed).collect();
        return Err(mismatch(format!("unexpected changes {extra:?}; expected but unchanged {missing:?}")));
    }
    Ok(())
}

fn synth(out: &Path, seed: u64, scale: Scale) -> Result<(), Failure> {
    let scale = match scale {
        Scale::Standard => ToyScale::standard(),
        Scale::Smoke => ToyScale::smoke(),
    };
    let path = write_toy_experiment(out, seed, &scale).map_err(|e| stage_err(format!("{}: {e}", out.display())))?;
    println!("{}", path.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Clean { input, out, config, stats, profile } => {
            clean(&input, &out, &config, stats.as_deref(), profile.as_deref())
        }
        Command::TrainTokenizer { corpus, size, out, sample_bytes, seed } => {
            train_tokenizer(&corpus, size, &out, sample_bytes, seed)
        }
        Command::MergeVocab { base, new, out, report, no_sep } => merge_vocab(&base, &new, &out, &report, no_sep),
        Command::CountParams { config, stage } => count_params(&config, stage),
        Command::PretrainAlign(a) => stages(&a, &[StageKind::EmbedAlignMono, StageKind::EmbedAlignBilingual]),
        Command::PretrainLora(a) => stages(&a, &[StageKind::LoraPretrain]),
        Command::InstructTune(a) => stages(&a, &[StageKind::InstructTune]),
        Command::Evaluate { checkpoint, tasks, out, max_new_tokens } => {
            evaluate(&checkpoint, &tasks, &out, max_new_tokens)
        }
        Command::Run { config } => run(&config),
        Command::Verify { a, b, expect_changed, json } => verify(&a, &b, expect_changed.as_deref(), json),
        Command::Synth { out, seed, scale } => synth(&out, seed, scale),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
