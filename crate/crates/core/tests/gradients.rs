use std::collections::BTreeSet;

use graft_core::model::*;
use graft_core::training::gradcheck::{check_gradients, relative_error};
use graft_core::training::{backward, stage_mask, Batch, BatchRow, StageKind};

fn toy() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ffn: 12, vocab_size: 13, max_seq_len: 16, rotary_base: 10_000.0, norm_eps: 1e-5 }
}

/// Toy model with scaled-up embeddings and LoRA adapters whose B factors
/// are nonzero, so every adapter factor carries gradient.
fn fixture(seed: u64) -> (ParameterStore, AdapterSet) {
    let mut store = build_model(&toy(), seed).unwrap();
    for v in store.tensor_mut(TOKEN_EMBEDDING).unwrap().data_mut() {
        *v *= 50.0;
    }
    let spec = LoraSpec { rank: 2, alpha: 4.0, projections: Projection::ALL.to_vec() };
    let mut adapters = attach_lora(&store, &spec.targets(&toy()), 2, 4.0, seed + 6).unwrap();
    for (i, n) in adapters.parameter_names().iter().enumerate() {
        if n.ends_with("lora_b") {
            for (j, v) in adapters.tensor_mut(n).unwrap().data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + j * 3) % 11) as f32 * 0.01 - 0.05;
            }
        }
    }
    (store, adapters)
}

fn batch(kind: StageKind) -> Batch {
    let rows = if kind == StageKind::InstructTune {
        vec![
            BatchRow { ids: vec![1, 6, 8, 10, 4, 2], loss_mask: vec![false, false, false, true, true, true], truncated: false },
            BatchRow { ids: vec![1, 9, 3, 12, 2], loss_mask: vec![false, false, true, true, true], truncated: false },
        ]
    } else {
        vec![BatchRow::fully_supervised(vec![1, 5, 7, 2, 9, 11]), BatchRow::fully_supervised(vec![3, 4, 12, 0])]
    };
    Batch::from_rows(&rows, 0, kind.name()).unwrap()
}

const KINDS: [StageKind; 4] =
    [StageKind::BasePretrain, StageKind::EmbedAlignMono, StageKind::LoraPretrain, StageKind::InstructTune];

#[test]
fn finite_differences_agree_for_every_stage_mask() {
    let (store, adapters) = fixture(3);
    for kind in KINDS {
        let mask = stage_mask(kind, &store, &adapters).unwrap();
        let r = check_gradients(&store, &adapters, &batch(kind), &mask, 1e-3, 1).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_relative_error < 1e-4, "{}: {r:?}", kind.name());
    }
}

#[test]
fn finite_differences_agree_across_seeds() {
    for seed in [1, 8, 21] {
        let (store, adapters) = fixture(seed);
        let mask = stage_mask(StageKind::LoraPretrain, &store, &adapters).unwrap();
        let r = check_gradients(&store, &adapters, &batch(StageKind::LoraPretrain), &mask, 1e-3, 3).unwrap();
        assert!(r.max_relative_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn gradient_names_follow_the_mask() {
    let (store, adapters) = fixture(3);
    let align = stage_mask(StageKind::EmbedAlignBilingual, &store, &adapters).unwrap();
    let g = backward(&store, &adapters, &batch(StageKind::EmbedAlignBilingual), &align).unwrap().grads;
    let names: BTreeSet<&str> = g.names().collect();
    assert_eq!(names, BTreeSet::from([TOKEN_EMBEDDING, LM_HEAD]));

    let lora = stage_mask(StageKind::LoraPretrain, &store, &adapters).unwrap();
    let g = backward(&store, &adapters, &batch(StageKind::LoraPretrain), &lora).unwrap().grads;
    let names: BTreeSet<String> = g.names().map(String::from).collect();
    let mut want: BTreeSet<String> = adapters.parameter_names().into_iter().collect();
    want.insert(TOKEN_EMBEDDING.into());
    want.insert(LM_HEAD.into());
    assert_eq!(names, want);
}

#[test]
fn prompt_positions_carry_no_loss() {
    let (store, adapters) = fixture(3);
    let mask = stage_mask(StageKind::InstructTune, &store, &adapters).unwrap();
    let full = backward(&store, &adapters, &batch(StageKind::InstructTune), &mask).unwrap();
    let rows = vec![
        BatchRow { ids: vec![1, 6, 8, 10, 4, 2], loss_mask: vec![false, false, false, true, true, true], truncated: false },
        BatchRow { ids: vec![1, 9, 3, 12, 2], loss_mask: vec![false, false, true, true, true], truncated: false },
    ];
    assert_eq!(full.positions, rows.iter().map(|r| r.predicted_positions()).sum::<usize>());
}

#[test]
fn lora_pretraining_needs_adapters() {
    let (store, _) = fixture(3);
    assert!(stage_mask(StageKind::LoraPretrain, &store, &AdapterSet::empty()).is_err());
    let m = stage_mask(StageKind::InstructTune, &store, &AdapterSet::empty()).unwrap();
    assert_eq!(m.names().collect::<Vec<_>>(), vec![LM_HEAD, TOKEN_EMBEDDING]);
}

#[test]
fn relative_error_uses_the_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
}
