use proptest::prelude::*;

use graft_core::model::*;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig { n_layers: layers, d_model: 8, n_heads: 2, d_ffn: 12, vocab_size: 17, max_seq_len: 16, rotary_base: 10_000.0, norm_eps: 1e-5 }
}

fn mat(store: &ParameterStore, name: &str) -> Vec<Vec<f64>> {
    let t = store.tensor(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn vecf(store: &ParameterStore, name: &str) -> Vec<f64> {
    store.tensor(name).unwrap().data().iter().map(|&v| v as f64).collect()
}

/// `W x` for `W` given as rows.
fn apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(g).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
}

/// Rotates each adjacent pair as a complex number by `pos · θ_i`.
fn rotate(x: &[f64], pos: usize, heads: usize, base: f64) -> Vec<f64> {
    let hd = x.len() / heads;
    let mut out = x.to_vec();
    for h in 0..heads {
        for i in 0..hd / 2 {
            let angle = pos as f64 / base.powf(2.0 * i as f64 / hd as f64);
            let (re, im) = (x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
            let (c, s) = (angle.cos(), angle.sin());
            out[h * hd + 2 * i] = re * c - im * s;
            out[h * hd + 2 * i + 1] = re * s + im * c;
        }
    }
    out
}

/// Straight-line reference decoder, one position at a time.
fn reference_logits(store: &ParameterStore, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = store.config().clone();
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let emb = mat(store, TOKEN_EMBEDDING);
    let mut xs: Vec<Vec<f64>> = ids.iter().map(|&i| emb[i as usize].clone()).collect();
    for l in 0..cfg.n_layers {
        let w = |p| mat(store, &projection_name(l, p));
        let (wq, wk, wv, wo) = (w(Projection::Q), w(Projection::K), w(Projection::V), w(Projection::O));
        let g1 = vecf(store, &attn_norm_name(l));
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &g1, cfg.norm_eps)).collect();
        let qs: Vec<Vec<f64>> = normed.iter().enumerate().map(|(p, n)| rotate(&apply(&wq, n), p, nh, cfg.rotary_base)).collect();
        let ks: Vec<Vec<f64>> = normed.iter().enumerate().map(|(p, n)| rotate(&apply(&wk, n), p, nh, cfg.rotary_base)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|n| apply(&wv, n)).collect();
        let mut next = Vec::new();
        for t in 0..xs.len() {
            let mut ctx = vec![0.0; d];
            for h in 0..nh {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..xs.len())
                    .map(|s| {
                        if s > t {
                            f64::NEG_INFINITY
                        } else {
                            qs[t][r.clone()].iter().zip(&ks[s][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..=t {
                    for j in r.clone() {
                        ctx[j] += e[s] / z * vs[s][j];
                    }
                }
            }
            let mid: Vec<f64> = xs[t].iter().zip(apply(&wo, &ctx)).map(|(a, b)| a + b).collect();
            let n2 = rms(&mid, &vecf(store, &ffn_norm_name(l)), cfg.norm_eps);
            let gate = apply(&w(Projection::Gate), &n2);
            let up = apply(&w(Projection::Up), &n2);
            let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            next.push(mid.iter().zip(apply(&w(Projection::Down), &hidden)).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let head = mat(store, LM_HEAD);
    let gf = vecf(store, FINAL_NORM);
    xs.iter().map(|x| apply(&head, &rms(x, &gf, cfg.norm_eps))).collect()
}

#[test]
fn forward_matches_reference() {
    for layers in [1, 2] {
        let store = build_model(&tiny(layers), 11).unwrap();
        let ids = vec![3u32, 0, 16, 7, 7, 2, 9];
        let got = forward(&store, &AdapterSet::empty(), &[ids.clone()]).unwrap();
        let want = reference_logits(&store, &ids);
        for (t, row) in want.iter().enumerate() {
            for (a, b) in got.at(0, t).iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "layers {layers} t {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn parameter_count_matches_layout() {
    for cfg in [tiny(1), tiny(3), ModelConfig { d_ffn: 20, vocab_size: 40, ..tiny(2) }] {
        let store = build_model(&cfg, 1).unwrap();
        let layout: u64 = parameter_layout(&cfg).iter().map(|(_, _, s)| s.iter().product::<usize>() as u64).sum();
        assert_eq!(store.num_parameters(), layout);
        assert_eq!(base_parameter_count(&cfg), layout);
        let spec = LoraSpec { rank: 2, alpha: 4.0, projections: Projection::ALL.to_vec() };
        let adapters = attach_lora(&store, &spec.targets(&cfg), 2, 4.0, 1).unwrap();
        assert_eq!(adapters.num_parameters(), spec.num_parameters(&cfg));
        let c = count_parameters(&cfg, AccountingStage::LoraPretrain, Some(&spec));
        assert_eq!(c.total, layout + adapters.num_parameters());
        assert_eq!(c.trainable, 2 * (cfg.vocab_size * cfg.d_model) as u64 + adapters.num_parameters());
        let a = count_parameters(&cfg, AccountingStage::Alignment, Some(&spec));
        assert_eq!((a.total, a.trainable), (layout, 2 * (cfg.vocab_size * cfg.d_model) as u64));
    }
}

#[test]
fn full_scale_accounting_by_enumeration() {
    let cfg = ModelConfig::llama2_7b(49_817);
    let layout: u64 = parameter_layout(&cfg).iter().map(|(_, _, s)| s.iter().product::<usize>() as u64).sum();
    assert_eq!(layout, 6_884_372_480);
    assert_eq!(LoraSpec::default().num_parameters(&cfg), 19_988_480);
}

#[test]
fn zero_b_adapters_leave_logits_unchanged() {
    let cfg = tiny(2);
    let store = build_model(&cfg, 4).unwrap();
    let adapters = attach_lora(&store, &LoraSpec::default().targets(&cfg), 4, 16.0, 5).unwrap();
    let ids = vec![vec![1u32, 4, 9, 2, 16]];
    let plain = forward(&store, &AdapterSet::empty(), &ids).unwrap();
    let adapted = forward(&store, &adapters, &ids).unwrap();
    assert_eq!(plain, adapted);
}

#[test]
fn merged_adapters_match_unmerged_forward() {
    let cfg = tiny(2);
    let store = build_model(&cfg, 4).unwrap();
    let mut adapters = attach_lora(&store, &LoraSpec::default().targets(&cfg), 4, 16.0, 5).unwrap();
    for n in adapters.parameter_names() {
        if n.ends_with("lora_b") {
            for (i, v) in adapters.tensor_mut(&n).unwrap().data_mut().iter_mut().enumerate() {
                *v = ((i % 7) as f32 - 3.0) * 0.01;
            }
        }
    }
    let ids = vec![vec![1u32, 4, 9, 2, 16], vec![0, 0, 3, 5, 8]];
    let adapted = forward(&store, &adapters, &ids).unwrap();
    let merged = merge_lora(&store, &mut adapters).unwrap();
    assert!(adapters.is_consumed());
    assert!(forward(&store, &adapters, &ids).is_err());
    let folded = forward(&merged, &AdapterSet::empty(), &ids).unwrap();
    for (a, b) in adapted.data.iter().zip(&folded.data) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn expansion_keeps_old_rows_and_logits() {
    let cfg = tiny(2);
    let store = build_model(&cfg, 2).unwrap();
    for policy in [InitPolicy::Zero, InitPolicy::Mean { noise_std: 0.0 }, InitPolicy::Mean { noise_std: 0.02 }, InitPolicy::Random { std: 0.02 }] {
        let grown = expand_embeddings(&store, 17, 25, policy, 3).unwrap();
        assert_eq!(grown.config().vocab_size, 25);
        for name in [TOKEN_EMBEDDING, LM_HEAD] {
            let (old, new) = (store.tensor(name).unwrap(), grown.tensor(name).unwrap());
            assert_eq!(new.shape(), [25, 8]);
            assert_eq!(&new.data()[..old.numel()], old.data());
            if policy == (InitPolicy::Mean { noise_std: 0.0 }) {
                for j in 0..8 {
                    let mean = (0..17).map(|i| old.row(i)[j] as f64).sum::<f64>() / 17.0;
                    assert!((new.row(20)[j] as f64 - mean).abs() < 1e-6);
                }
            }
            if policy == InitPolicy::Zero {
                assert!(new.row(24).iter().all(|&v| v == 0.0));
            }
        }
        let ids = vec![vec![1u32, 4, 9, 2, 16]];
        let before = forward(&store, &AdapterSet::empty(), &ids).unwrap();
        let after = forward(&grown, &AdapterSet::empty(), &ids).unwrap();
        for t in 0..5 {
            assert_eq!(&after.at(0, t)[..17], before.at(0, t));
        }
    }
    assert!(expand_embeddings(&store, 17, 17, InitPolicy::Zero, 0).is_err());
    assert!(expand_embeddings(&store, 16, 20, InitPolicy::Zero, 0).is_err());
}

#[test]
fn out_of_range_ids_are_rejected() {
    let store = build_model(&tiny(1), 1).unwrap();
    assert!(forward(&store, &AdapterSet::empty(), &[vec![17]]).is_err());
    assert!(forward(&store, &AdapterSet::empty(), &[vec![1; 17]]).is_err());
    assert!(forward(&store, &AdapterSet::empty(), &[vec![1, 2], vec![3]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(prefix in prop::collection::vec(0u32..17, 1..8), a in prop::collection::vec(0u32..17, 1..6), b in prop::collection::vec(0u32..17, 1..6), seed in 0u64..50) {
        let store = build_model(&tiny(2), seed).unwrap();
        let mut x = prefix.clone();
        x.extend(&a);
        let mut y = prefix.clone();
        y.extend(&b);
        let lx = forward(&store, &AdapterSet::empty(), &[x]).unwrap();
        let ly = forward(&store, &AdapterSet::empty(), &[y]).unwrap();
        for t in 0..prefix.len() {
            prop_assert_eq!(lx.at(0, t), ly.at(0, t));
        }
        prop_assert!(lx.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn build_is_deterministic(seed in 0u64..1000) {
        let a = build_model(&tiny(1), seed).unwrap();
        let b = build_model(&tiny(1), seed).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}
