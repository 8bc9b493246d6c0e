use proptest::prelude::*;

use super::*;
use crate::autodiff::{elu_plus_one, SoftmaxSpec};

fn hidden(t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::matrix(t, d, (0..t * d).map(|_| normal.sample(&mut rng)).collect()).unwrap()
}

fn perturbed(d: usize, d_r: usize, seed: u64) -> RouterParams {
    let mut p = RouterParams::init(d, d_r, 0.5, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let normal = Normal::new(0.0, 0.7).unwrap();
    p.wp.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    p.alpha = Tensor::new(vec![1], vec![1.3]).unwrap();
    p
}

// Token-by-token recurrence over running sums S_t and z_t.
fn incremental_scores(p: &RouterParams, h: &Tensor) -> Vec<f64> {
    let (d, r) = (p.wq.rows(), p.d_r());
    let proj = |x: &[f64], w: &Tensor| -> Vec<f64> { (0..w.cols()).map(|j| (0..x.len()).map(|k| x[k] * w.at(k, j)).sum()).collect() };
    let unit = |x: Vec<f64>| {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.into_iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let mut s = vec![vec![0.0; r]; r];
    let mut z = vec![0.0; r];
    let mut out = Vec::new();
    for t in 0..h.rows() {
        let x = h.row(t);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64 + NORM_EPS).sqrt();
        let xn: Vec<f64> = x.iter().map(|v| v / rms).collect();
        let q: Vec<f64> = proj(&xn, &p.wq).into_iter().map(elu_plus_one).collect();
        let k: Vec<f64> = proj(&xn, &p.wk).into_iter().map(elu_plus_one).collect();
        let v = proj(&xn, &p.wv);
        for a in 0..r {
            z[a] += k[a];
            for b in 0..r {
                s[a][b] += k[a] * v[b];
            }
        }
        let den: f64 = q.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + p.eps_den;
        let num: Vec<f64> = (0..r).map(|b| (0..r).map(|a| q[a] * s[a][b]).sum::<f64>() / den).collect();
        let ctx = proj(&num, &p.wo);
        let u = unit(proj(x, &p.wp));
        let w = unit(x.iter().zip(&ctx).map(|(a, c)| a + p.alpha.item() * c).collect());
        out.push((1.0 - u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()) / 2.0);
    }
    out
}

#[test]
fn initial_scores_are_one() {
    let p = RouterParams::init(16, 8, 0.5, 1).unwrap();
    let s = router_scores(&p, &hidden(10, 16, 2)).unwrap();
    assert!(s.iter().all(|&v| (v - 1.0).abs() <= 1e-15), "{s:?}");
    let trace = RouterTrace::new(s, p.tau);
    assert_eq!((trace.f, trace.mask.len()), (1.0, 10));
}

#[test]
fn orthogonal_projection_scores_half() {
    let mut p = RouterParams::init(2, 2, 0.5, 1).unwrap();
    p.wp = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, -2.0]]).unwrap();
    for v in router_scores(&p, &h).unwrap() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn full_sequence_scores_match_recurrence() {
    let p = perturbed(12, 6, 3);
    let h = hidden(9, 12, 4);
    let full = router_scores(&p, &h).unwrap();
    let inc = incremental_scores(&p, &h);
    for (a, b) in full.iter().zip(&inc) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    // A prefix of the sequence sees the same scores.
    let head = Tensor::matrix(5, 12, h.data()[..60].to_vec()).unwrap();
    assert_eq!(router_scores(&p, &head).unwrap(), full[..5].to_vec());
}

#[test]
fn zero_hidden_row_is_a_precondition_error() {
    let p = RouterParams::init(4, 2, 0.5, 0).unwrap();
    let mut h = hidden(3, 4, 0);
    h.row_mut(1).fill(0.0);
    assert!(matches!(router_scores(&p, &h), Err(Error::Precondition(_))));
}

#[test]
fn bad_router_config_is_rejected() {
    assert!(matches!(RouterParams::init(4, 2, 1.0, 0), Err(Error::Config(_))));
    let bad = SparsificationPolicy { kind: PolicyKind::Rand, rho: 1.0, seed: 0 };
    assert!(bad.validate().is_err());
    assert_eq!("attn".parse::<PolicyKind>().unwrap(), PolicyKind::Attn);
    assert!("topk".parse::<PolicyKind>().is_err());
}

proptest! {
    #[test]
    fn scores_stay_in_unit_interval(seed in 0u64..500, t in 1usize..8) {
        let p = perturbed(6, 3, seed);
        for v in router_scores(&p, &hidden(t, 6, seed + 7)).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn ste_gate_forward_is_the_hard_mask() {
    let (m, g) = ste_gate(&[0.9, 0.1], 0.5);
    assert_eq!(m, vec![true, false]);
    assert_eq!(g, vec![1.0, 0.0]);
    assert_eq!(ste_gate(&[0.5], 0.5).0, vec![false]);
}

#[test]
fn ste_gate_backward_is_identity() {
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![4], vec![0.9, 0.2, 0.51, 0.5]).unwrap());
    let gate = g.ste_gate(p, 0.5);
    assert_eq!(g.value(gate).data(), &[1.0, 0.0, 1.0, 0.0]);
    let s = g.sum(gate);
    // Finite differences on the surrogate m + (p - sg(p)) give slope 1.
    assert_eq!(g.backward(s).unwrap().wrt(p).data(), &[1.0; 4]);
}

#[test]
fn gating_with_ones_is_plain_softmax() {
    let s = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
    let got = apply_gate_to_attention(&s, &[1.0; 3]).unwrap();
    let want = crate::autodiff::softmax_rows(&s);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn binary_gate_equals_masked_softmax() {
    let s = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
    let got = apply_gate_to_attention(&s, &[1.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(s.clone());
    let mask = Tensor::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
    let y = g.masked_row_softmax(x, &mask, 1.0).unwrap();
    for (a, b) in got.data().iter().zip(g.value(y).data()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(got.at(0, 1), 0.0);
}

#[test]
fn own_slot_stays_open_and_empty_rows_fail() {
    let s = Tensor::from_rows(&[vec![0.0, 5.0]]).unwrap();
    let got = apply_gate_to_attention(&s, &[0.0, 0.0]).unwrap();
    assert_eq!(got.data(), &[0.0, 1.0]);
    let under = Tensor::from_rows(&[vec![-1e300, -f64::INFINITY]]).unwrap();
    assert!(matches!(apply_gate_to_attention(&under, &[0.0, 0.0]), Err(Error::Precondition(_))));
}

#[test]
fn dropped_slots_get_no_attention_path_gradient() {
    let t = 4;
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![t], vec![0.8, 0.3, 0.9, 0.6]).unwrap());
    let gate = g.ste_gate(p, 0.5);
    let logits = g.constant(hidden(t, t, 5));
    // Same wiring as the masked model pass: hard visibility plus the gate.
    let visible = crate::model::masked_visibility(&[true, false, true, true]);
    let spec = SoftmaxSpec::new(1.0).with_mask(visible).with_self_slot(0);
    let a = g.softmax(logits, Some(gate), spec).unwrap();
    let w = g.constant(hidden(t, t, 6));
    let prod = g.mul(a, w).unwrap();
    let loss = g.sum(prod);
    let dp = g.backward(loss).unwrap().wrt(p);
    assert_eq!(dp.data()[1], 0.0);
    // Key 3 is only seen by query 3, whose own slot is pinned open.
    assert!(dp.data()[0] != 0.0 && dp.data()[2] != 0.0 && dp.data()[3] == 0.0);
}

#[test]
fn rand_policy_is_exact_count_and_seeded() {
    let m = rand_policy(8, 0.5, 11);
    assert_eq!(m.iter().filter(|&&b| b).count(), 4);
    assert_eq!(m, rand_policy(8, 0.5, 11));
    assert_eq!(rand_policy(7, 0.5, 1).iter().filter(|&&b| b).count(), 4);
}

#[test]
fn rand_policy_is_uniform_over_slots() {
    let mut counts = [0usize; 8];
    let draws = 10_000;
    for s in 0..draws {
        for (c, k) in counts.iter_mut().zip(rand_policy(8, 0.5, s)) {
            *c += k as usize;
        }
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.5).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn attn_policy_keeps_heavy_sources_and_breaks_ties_early() {
    let mut heavy = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        *heavy.row_mut(i).last_mut().unwrap() = 1.0;
    }
    let m = attn_policy(&[&heavy], 0.25).unwrap();
    assert_eq!(m, vec![false, false, false, true]);
    let uniform = Tensor::full(&[4, 6], 0.25);
    let m = attn_policy(&[&uniform, &uniform], 0.5).unwrap();
    assert_eq!(m, vec![true, true, true, false, false, false]);
}

#[test]
fn keep_count_rounds_up_without_float_noise() {
    assert_eq!(keep_count(0.5, 8), 4);
    assert_eq!(keep_count(0.1, 30), 3);
    assert_eq!(keep_count(0.25, 192), 48);
    assert_eq!(keep_count(0.2, 7), 2);
    assert_eq!(keep_count(1.0, 5), 5);
}
