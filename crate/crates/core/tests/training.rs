use std::collections::BTreeMap;

use proptest::prelude::*;

use graft_core::model::*;
use graft_core::tokenizer::{train_subword, Codec, TrainerConfig, Vocabulary, SEP};
use graft_core::training::*;

fn vocab() -> Vocabulary {
    let corpus = ["hello world", "salam donya", "### Instruction: Response: Input:"];
    train_subword(&corpus, &TrainerConfig::new(300)).unwrap().vocab.with_reserved(&[SEP]).0
}

fn example(instruction: &str, input: &str, output: &str) -> InstructionExample {
    InstructionExample {
        instruction: instruction.into(),
        input: input.into(),
        output: output.into(),
        language: "fa".into(),
        task: "qa".into(),
        is_translation: false,
    }
}

fn toy(vocab_size: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ffn: 24, vocab_size, max_seq_len: 32, rotary_base: 10_000.0, norm_eps: 1e-5 }
}

#[test]
fn instruction_template_golden() {
    assert_eq!(
        render_instruction(&example("Translate.", "salam", "hello")),
        "### Instruction:\nTranslate.\n\n### Input:\nsalam\n\n### Response:\nhello"
    );
    assert_eq!(render_prompt("Say hi.", ""), "### Instruction:\nSay hi.\n\n### Response:\n");
}

#[test]
fn instruction_rows_supervise_only_the_response() {
    let v = vocab();
    let c = Codec::new(&v);
    let ex = example("Translate.", "salam", "hello world");
    let row = format_instruction(&ex, &c, 256).unwrap();
    assert_eq!(c.decode(&row.ids).unwrap(), format!("<bos>{}<eos>", render_instruction(&ex)));
    let supervised: Vec<u32> = row.ids.iter().zip(&row.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    assert_eq!(c.decode(&supervised).unwrap(), "hello world<eos>");
    assert!(!row.truncated);

    let response = c.encode("hello world").unwrap().len();
    let parts = PromptIds::encode(&c, "Translate.", "salam").unwrap();
    let fixed = parts.header.len() + parts.input_header.len() + parts.response_header.len();
    let tight = format_instruction(&ex, &c, response + 2 + fixed + 1).unwrap();
    assert_eq!(tight.ids.len(), response + 2 + fixed + 1);
    assert!(tight.truncated);
    assert_eq!(c.decode(&tight.ids.iter().zip(&tight.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect::<Vec<_>>()).unwrap(), "hello world<eos>");
    assert!(format_instruction(&ex, &c, response + 1).is_err());
}

#[test]
fn bilingual_golden_both_directions() {
    let v = vocab();
    let c = Codec::new(&v);
    let pair = BilingualPair::new("salam donya", "hello world").unwrap();
    let row = make_bilingual_sequence(&pair, Direction::BaseToNew, &c, 64, BilingualLoss::SecondHalf).unwrap();
    assert_eq!(c.decode(&row.ids).unwrap(), "<bos>hello world<sep>salam donya<eos>");
    let supervised: Vec<u32> = row.ids.iter().zip(&row.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    assert_eq!(c.decode(&supervised).unwrap(), "salam donya<eos>");
    let row = make_bilingual_sequence(&pair, Direction::NewToBase, &c, 64, BilingualLoss::Both).unwrap();
    assert_eq!(c.decode(&row.ids).unwrap(), "<bos>salam donya<sep>hello world<eos>");
    assert_eq!(row.predicted_positions(), row.ids.len() - 1);
    assert_eq!(parse_parallel_tsv("salam donya\thello world\n").unwrap(), vec![pair]);
    assert!(parse_parallel_tsv("no tab here\n").is_err());
}

#[test]
fn packing_respects_row_length() {
    let sentences: Vec<Vec<u32>> = (0..20).map(|i| vec![10 + i as u32; 1 + i % 5]).collect();
    let rows = pack_monolingual(&sentences, 1, 2, 12);
    let eos_count: usize = rows.iter().map(|r| r.ids.iter().filter(|&&i| i == 2).count()).sum();
    assert_eq!(eos_count, 20);
    assert!(rows.iter().all(|r| r.ids.len() <= 12 && r.ids[0] == 1 && !r.truncated));
    let long = pack_monolingual(&[vec![5; 30]], 1, 2, 12);
    assert_eq!(long.len(), 1);
    assert!(long[0].truncated && long[0].ids.len() == 12);
}

fn random_rows(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<BatchRow> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| BatchRow::fully_supervised((0..len).map(|_| rng.random_range(3..vocab)).collect())).collect()
}

#[test]
fn frozen_tensors_stay_bit_identical() {
    let cfg = toy(40);
    let init = build_model(&cfg, 1).unwrap();
    let spec = LoraSpec { rank: 2, alpha: 8.0, projections: Projection::ALL.to_vec() };
    let adapters0 = attach_lora(&init, &spec.targets(&cfg), 2, 8.0, 2).unwrap();
    for kind in [StageKind::EmbedAlignMono, StageKind::EmbedAlignBilingual, StageKind::LoraPretrain, StageKind::InstructTune] {
        let (mut store, mut adapters) = (init.clone(), adapters0.clone());
        let stage = TrainingStage::new(kind, &store, &adapters, random_rows(16, 12, 40, 3), 0).unwrap();
        let mut hp = Hyperparams::new(10);
        hp.lr = Some(1e-2);
        train_stage(&mut store, &mut adapters, &stage, &hp).unwrap();
        for (name, p) in init.iter() {
            let changed = !p.tensor.bit_eq(store.tensor(name).unwrap());
            assert_eq!(changed, name == TOKEN_EMBEDDING || name == LM_HEAD, "{}: {name}", kind.name());
        }
        let adapters_changed = !adapters.bit_eq(&adapters0);
        assert_eq!(adapters_changed, !kind.is_alignment(), "{}", kind.name());
    }
}

#[test]
fn overfits_a_single_sentence() {
    let cfg = toy(20);
    let mut store = build_model(&cfg, 5).unwrap();
    let mut adapters = AdapterSet::empty();
    let rows = vec![BatchRow::fully_supervised(vec![1, 7, 3, 12, 9, 4, 15, 2])];
    let stage = TrainingStage::new(StageKind::BasePretrain, &store, &adapters, rows, 0).unwrap();
    let mut hp = Hyperparams::new(150);
    hp.lr = Some(1e-2);
    hp.batch_size = 1;
    let out = train_stage(&mut store, &mut adapters, &stage, &hp).unwrap();
    let (first, last) = (out.curve.first().unwrap(), out.curve.last().unwrap());
    assert!(last < 0.05 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let cfg = toy(30);
    let run = |seed: u64| {
        let mut store = build_model(&cfg, 9).unwrap();
        let mut adapters = attach_lora(&store, &LoraSpec::default().targets(&cfg), 2, 4.0, 1).unwrap();
        let stage = TrainingStage::new(StageKind::LoraPretrain, &store, &adapters, random_rows(24, 10, 30, 4), 0).unwrap();
        let mut hp = Hyperparams::new(12);
        hp.seed = seed;
        hp.batch_size = 4;
        let out = train_stage(&mut store, &mut adapters, &stage, &hp).unwrap();
        (store, adapters, out.curve)
    };
    let (s1, a1, c1) = run(3);
    let (s2, a2, c2) = run(3);
    assert!(s1.bit_eq(&s2) && a1.bit_eq(&a2));
    assert_eq!(c1.to_csv(), c2.to_csv());
    let (_, _, c3) = run(4);
    assert_ne!(c1.to_csv(), c3.to_csv());
}

#[test]
fn curves_record_schedule_and_tokens() {
    let cfg = toy(30);
    let mut store = build_model(&cfg, 2).unwrap();
    let mut adapters = AdapterSet::empty();
    let stage = TrainingStage::new(StageKind::EmbedAlignMono, &store, &adapters, random_rows(8, 10, 30, 1), 0).unwrap();
    let mut hp = Hyperparams::new(20);
    hp.batch_size = 2;
    let out = train_stage(&mut store, &mut adapters, &stage, &hp).unwrap();
    let pts = &out.curve.points;
    assert_eq!(pts.len(), 20);
    assert_eq!(pts[0].lr, 3e-4);
    assert!(pts[19].lr < pts[1].lr);
    assert_eq!(pts[19].tokens, 20 * 2 * 9);
    assert!(out.curve.to_csv().starts_with("step,loss,lr,tokens\n0,"));
}

#[test]
fn empty_or_oversized_data_is_rejected() {
    let cfg = toy(30);
    let mut store = build_model(&cfg, 2).unwrap();
    let mut adapters = AdapterSet::empty();
    let empty = TrainingStage::new(StageKind::EmbedAlignMono, &store, &adapters, vec![], 0).unwrap();
    assert!(matches!(train_stage(&mut store, &mut adapters, &empty, &Hyperparams::new(1)), Err(TrainError::Data(_))));
    let long = TrainingStage::new(StageKind::EmbedAlignMono, &store, &adapters, random_rows(1, 40, 30, 1), 0).unwrap();
    assert!(train_stage(&mut store, &mut adapters, &long, &Hyperparams::new(1)).is_err());
}

fn datasets(n_translation: usize, n_other: usize) -> Vec<InstructionDataset> {
    let mut t = example("Translate.", "x", "y");
    t.is_translation = true;
    vec![
        InstructionDataset { name: "translation".into(), examples: vec![t; n_translation] },
        InstructionDataset { name: "alpaca".into(), examples: vec![example("Q", "", "A"); n_other] },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixture_share_holds_for_any_seed(seed in any::<u64>(), share in 0.05f64..0.95, nt in 1usize..50, no in 1usize..50) {
        let ds = datasets(nt, no);
        let spec = MixtureSpec { weights: BTreeMap::new(), translation_share: share, seed };
        let mut m = Mixture::new(&ds, &spec).unwrap();
        let n = 4000;
        let hits = (0..n).filter(|_| m.draw().is_translation).count() as f64;
        let sigma = (share * (1.0 - share) / n as f64).sqrt();
        prop_assert!((hits / n as f64 - share).abs() < 5.0 * sigma);
    }

    #[test]
    fn mixture_is_reproducible(seed in any::<u64>()) {
        let ds = datasets(5, 7);
        let spec = MixtureSpec { seed, ..MixtureSpec::default() };
        let (mut a, mut b) = (Mixture::new(&ds, &spec).unwrap(), Mixture::new(&ds, &spec).unwrap());
        for _ in 0..50 {
            prop_assert_eq!(a.draw(), b.draw());
        }
    }
}

#[test]
fn mixture_falls_back_when_a_pool_is_empty() {
    let ds = datasets(0, 3);
    let mut m = Mixture::new(&ds, &MixtureSpec::default()).unwrap();
    assert!((0..100).all(|_| !m.draw().is_translation));
    assert!(Mixture::new(&ds, &MixtureSpec { translation_share: 1.5, ..MixtureSpec::default() }).is_err());
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut p = vec![0.5f32, -1.0, 2.0];
    opt.step_slice("w", &mut p, &[0.0, 0.0, 0.0], 1e-2).unwrap();
    assert_eq!(p, vec![0.5, -1.0, 2.0]);
    assert!(opt.step_slice("w", &mut p, &[f64::NAN, 0.0, 0.0], 1e-2).is_err());
}
