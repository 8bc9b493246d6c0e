use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::eval::{dense_suffix_logits, eval_suffix_metrics, tokenizer, SuffixExample};
use crate::model::{Model, ModelConfig};

fn toy_model() -> Model {
    Model::init(ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        router_layers: vec![0],
        seed: 9,
    })
    .unwrap()
}

fn example(n: usize, k: usize, seed: usize) -> SuffixExample {
    let toks: Vec<usize> = (0..n + k).map(|i| (i * i * 7 + seed * 13 + i) % 30).collect();
    SuffixExample { prefix: toks[..n].to_vec(), suffix: toks[n..].to_vec() }
}

fn weights_checksum(m: &Model) -> Vec<u64> {
    m.weights.named().into_iter().map(|(_, t)| t.checksum()).collect()
}

#[test]
fn rms_score_of_a_two_row_column() {
    let a = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.8, 0.2]]).unwrap();
    let s = am::rms_scores(&a);
    assert!((s[0] - 0.5f64.sqrt()).abs() < 1e-15);
    assert!((s[0] - 0.70711).abs() < 1e-5);
}

#[test]
fn key_selection_follows_rms_mass() {
    let a = Tensor::from_rows(&[vec![0.1, 0.0, 0.9], vec![0.2, 0.0, 0.8]]).unwrap();
    assert_eq!(am_select_keys(&a, 1).unwrap(), vec![2]);
    assert_eq!(am_select_keys(&a, 3).unwrap(), vec![0, 1, 2]);
    let tie = Tensor::from_rows(&[vec![0.5, 0.5, 0.0]]).unwrap();
    assert_eq!(am_select_keys(&tie, 1).unwrap(), vec![0]);
    assert!(matches!(am_select_keys(&a, 4), Err(Error::Budget { requested: 4, available: 3 })));
}

#[test]
fn one_dimensional_nnls_is_clipped_least_squares() {
    let e = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![0.5]]).unwrap();
    let z = [2.0, 3.0, 1.0];
    let want = (2.0 + 6.0 + 0.5) / (1.0 + 4.0 + 0.25);
    let fit = nnls_box(&e, &z, 10.0, 8).unwrap();
    assert!((fit.w[0] - want).abs() < 1e-14, "{:?}", fit.w);
    assert_eq!(nnls_box(&e, &z, 1.2, 8).unwrap().w, vec![1.2]);
    let (beta, fit) =
        am_fit_bias(&Tensor::from_rows(&[vec![0.0]]).unwrap(), &Tensor::from_rows(&[vec![1.0]]).unwrap(), &[1e-30], 5.0, 1).unwrap();
    assert!(fit.w[0] < 1e-29);
    assert!(beta[0] <= W_FLOOR.ln() + 1e-9 || (beta[0] - fit.w[0].ln()).abs() < 1e-9);
}

#[test]
fn negative_solution_is_projected_to_zero() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let fit = nnls_box(&e, &[-3.0, 0.5], 4.0, 8).unwrap();
    assert_eq!(fit.w[0], 0.0);
    assert!((fit.w[1] - 0.5).abs() < 1e-15);
    assert_eq!(fit.w[0].max(W_FLOOR).ln(), W_FLOOR.ln());
}

#[test]
fn full_key_set_reproduces_normalizers() {
    let q = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.1]]).unwrap();
    let k = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.4, 0.9]]).unwrap();
    let z: Vec<f64> =
        (0..3).map(|i| (0..2).map(|j| ((q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / 2f64.sqrt()).exp()).sum()).collect();
    let (beta, _) = am_fit_bias(&q, &k, &z, 2.0, 8).unwrap();
    assert!(beta.iter().all(|b| b.abs() < 1e-12), "{beta:?}");
}

proptest! {
    #[test]
    fn nnls_stays_feasible_and_monotone(
        e in proptest::collection::vec(0.0f64..2.0, 12),
        z in proptest::collection::vec(-1.0f64..3.0, 4),
        w_max in 0.5f64..4.0,
    ) {
        let e = Tensor::matrix(4, 3, e).unwrap();
        let fit = nnls_box(&e, &z, w_max, 8).unwrap();
        prop_assert!(fit.w.iter().all(|&w| (0.0..=w_max).contains(&w)));
        prop_assert_eq!(fit.objective.len(), 9);
        for pair in fit.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
    }
}

#[test]
fn value_fit_examples() {
    let p = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let o = Tensor::from_rows(&[vec![2.0]]).unwrap();
    assert_eq!(am_fit_values(&p, &o, 0.0).unwrap().data(), &[2.0]);
    let big = am_fit_values(&p, &o, 1e12).unwrap();
    assert!(big.data()[0].abs() < 1e-11);
    // Orthonormal columns: the normal equations reduce to PᵀO.
    let s = 0.5f64.sqrt();
    let p = Tensor::from_rows(&[vec![s, 0.0], vec![s, 0.0], vec![0.0, 1.0]]).unwrap();
    let o = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.25]]).unwrap();
    let got = am_fit_values(&p, &o, 0.0).unwrap();
    let want = p.transpose().matmul(&o).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let singular = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(matches!(am_fit_values(&singular, &o.transpose().matmul(&o).unwrap(), 0.0), Err(Error::Numerical(_))));
}

#[test]
fn spectral_norm_matches_largest_singular_value() {
    let p = nalgebra::DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    assert!((am::spectral_norm(&p) - 3.0).abs() < 1e-12);
}

#[test]
fn am_respects_the_budget_everywhere() {
    let model = toy_model();
    let ex = example(20, 12, 1);
    for keep in [0.1, 0.25, 0.5, 1.0] {
        let cfg = AmConfig { keep_ratio: keep, ..AmConfig::default() };
        let (c, report) = attention_matching_compress(&model, &ex.prefix, &ex.suffix, &cfg).unwrap();
        let m = (keep * 20.0f64).ceil() as usize;
        assert_eq!(c.slots, m);
        c.validate(&model.config).unwrap();
        assert!(c.heads.iter().flatten().all(|h| h.bias.as_ref().unwrap().len() == m));
        assert!(report.nnls_objective.iter().flatten().all(|(a, b)| b <= a));
    }
    assert!(matches!(attention_matching_compress(&model, &[], &ex.suffix, &AmConfig::default()), Err(Error::Precondition(_))));
}

#[test]
fn am_full_budget_is_exact() {
    let model = toy_model();
    let cfg = AmConfig { keep_ratio: 1.0, ridge: 0.0, ..AmConfig::default() };
    for seed in 0..4 {
        let ex = example(12, 30, seed);
        let (c, report) = attention_matching_compress(&model, &ex.prefix, &ex.suffix, &cfg).unwrap();
        assert!(report.residuals.iter().flatten().all(|&r| r < 1e-6), "{:?}", report.residuals);
        let m = eval_suffix_metrics(&model, &ex, &c).unwrap();
        assert!(m.kl < 1e-6, "{m:?}");
    }
}

#[test]
fn init_modes_copy_dense_slots() {
    let model = toy_model();
    let ex = example(5, 3, 2);
    let cache = model.forward_dense(&ex.prefix, None).unwrap().cache;
    let first = grad_compact_init(&cache, 2, InitMode::FirstM).unwrap();
    assert_eq!(first.slots, 2);
    assert_eq!(first.heads[1][0].keys, cache.keys[1][0].data()[..2 * first.d_head].to_vec());
    assert!(!first.has_bias());
    let a = grad_compact_init(&cache, 3, InitMode::RandomM { seed: 4 }).unwrap();
    assert_eq!(a, grad_compact_init(&cache, 3, InitMode::RandomM { seed: 4 }).unwrap());
    assert_eq!(grad_compact_init(&cache, 5, InitMode::FirstM).unwrap(), crate::model::CompressedPrefixCache::from_dense(&cache));
    assert!(matches!(grad_compact_init(&cache, 6, InitMode::FirstM), Err(Error::Budget { .. })));
}

#[test]
fn identity_init_has_zero_compaction_loss() {
    let model = toy_model();
    let ex = example(10, 6, 3);
    let teacher = dense_suffix_logits(&model, &ex).unwrap();
    let cache = model.forward_dense(&ex.prefix, None).unwrap().cache;
    let init = grad_compact_init(&cache, 10, InitMode::FirstM).unwrap();
    let cfg = CompactOptConfig { steps: 0, record_steps: vec![0], ..CompactOptConfig::default() };
    let (_, trace) = grad_compact_optimize(&model, &init, &ex, &teacher, &cfg).unwrap();
    assert!(trace.at(0).unwrap() < 1e-9, "{trace:?}");
}

#[test]
fn compaction_makes_progress_and_leaves_weights_alone() {
    let model = toy_model();
    let before = weights_checksum(&model);
    for seed in 0..2 {
        let ex = example(16, 8, seed);
        let teacher = dense_suffix_logits(&model, &ex).unwrap();
        let cache = model.forward_dense(&ex.prefix, None).unwrap().cache;
        let init = keep_first_m(&cache, 4).unwrap();
        let cfg = CompactOptConfig { record_metrics: true, ..CompactOptConfig::default() };
        let (out, trace) = grad_compact_optimize(&model, &init, &ex, &teacher, &cfg).unwrap();
        let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, DEFAULT_RECORD_STEPS.to_vec());
        assert!(trace.at(100).unwrap() < trace.at(0).unwrap(), "{trace:?}");
        let last = trace.records.last().unwrap().metrics.unwrap();
        assert!((last.kl - trace.at(100).unwrap()).abs() < 1e-9);
        assert_eq!(out.slots, 4);
    }
    assert_eq!(weights_checksum(&model), before);
}

#[test]
fn compaction_config_is_checked() {
    let cfg = CompactOptConfig { record_steps: vec![0, 200], ..CompactOptConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn reconstruction_sequence_layout() {
    let text = tokenizer::encode_str("Alpha 12, beta.");
    let instr = tokenizer::encode_str(RECON_INSTRUCTION);
    let r = build_reconstruction_sequence(&text, 1000).unwrap();
    assert_eq!(r.tokens.len(), 2 * text.len() + instr.len());
    assert_eq!(r.loss_start, text.len() + instr.len());
    assert_eq!(&r.tokens[r.loss_span()], &text[..]);
    assert_eq!(tokenizer::decode_lossy(&r.tokens[text.len()..r.loss_start]), RECON_INSTRUCTION);
    assert!(build_reconstruction_sequence(&[], 100).is_err());
}

#[test]
fn long_text_is_cut_in_the_middle() {
    let text: Vec<usize> = (0..200).map(|i| i % 256).collect();
    let instr = tokenizer::encode_str(RECON_INSTRUCTION).len();
    let r = build_reconstruction_sequence(&text, instr + 100).unwrap();
    assert!(r.tokens.len() <= instr + 100);
    assert_eq!(r.text_len, 50);
    assert_eq!(&r.tokens[..25], &text[..25]);
    assert_eq!(&r.tokens[25..50], &text[175..]);
}

#[test]
fn compact_cache_round_trips() {
    let model = toy_model();
    let ex = example(8, 8, 0);
    let (c, _) = attention_matching_compress(&model, &ex.prefix, &ex.suffix, &AmConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.kvcat");
    save_compact(&c, &path).unwrap();
    assert_eq!(load_compact(&path).unwrap(), c);
    let plain = keep_first_m(&model.forward_dense(&ex.prefix, None).unwrap().cache, 3).unwrap();
    assert_eq!(compact_from_file(&compact_to_file(&plain)).unwrap(), plain);
    let names: Vec<String> = compact_to_file(&c).arrays.iter().map(|a| a.name.clone()).collect();
    assert!(names.contains(&"layer1.head0.beta".to_string()));
}

#[test]
fn identity_compression_gives_exact_zero_metrics() {
    let model = toy_model();
    for seed in 0..5 {
        let ex = example(14, 9, seed);
        let cache = model.forward_dense(&ex.prefix, None).unwrap().cache;
        let m = eval_suffix_metrics(&model, &ex, &crate::model::CompressedPrefixCache::from_dense(&cache)).unwrap();
        assert_eq!(m, crate::eval::SuffixMetrics { dppl: 0.0, kl: 0.0, top1: 1.0 });
    }
}

#[test]
fn wide_full_rank_fit_is_exact_without_ridge() {
    let p = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.1, 0.3, 0.6]]).unwrap();
    let o = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let c2 = am_fit_values(&p, &o, 0.0).unwrap();
    for (a, b) in p.matmul(&c2).unwrap().data().iter().zip(o.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
