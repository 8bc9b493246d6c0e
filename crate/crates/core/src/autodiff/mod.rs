//! Dense f64 tensors, a reverse-mode graph with a fixed operation
//! vocabulary, and the AdamW optimizer used by every training loop.

mod graph;
mod optim;
mod tensor;

pub(crate) use graph::log_softmax_into;
pub use graph::{causal_mask, elu_plus_one, gelu, Gradients, Graph, SoftmaxSpec, Var};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamState, AdamWConfig};
pub use tensor::Tensor;

/// Numerically stable softmax of one row.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x, &mut out);
    out
}

/// Row-wise softmax of a matrix, outside of any graph.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.numel()];
    let c = t.cols();
    for i in 0..t.rows() {
        log_softmax_into(t.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central finite differences of `f` at `inputs`, independent of backward.
    fn numeric_grad(inputs: &[Tensor], which: usize, h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-8)
    }

    /// Builds a scalar graph from `inputs` (all trainable) and checks every
    /// input gradient against finite differences.
    fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root).unwrap();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(v);
            let numeric = numeric_grad(inputs, i, 1e-5, &eval);
            let err = rel_err(analytic.data(), &numeric);
            assert!(err < 1e-6, "input {i}: rel err {err}\n analytic {:?}\n numeric {numeric:?}", analytic.data());
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut g = Graph::new();
        let a = g.param(Tensor::identity(2));
        let b = g.constant(t(&[vec![2.0, 0.0], vec![0.0, 2.0]]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn transposed_matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 3, 5)];
        check_grads(&inputs, &|g, v| {
            let p = g.matmul_t(v[0], v[1], false, true).unwrap();
            let q = g.mul(p, v[2]).unwrap();
            let r = g.matmul_t(q, v[0], true, false).unwrap();
            g.sum(r)
        });
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![0.0, 0.0]]));
        let ones = t(&[vec![1.0, 1.0]]);
        let s = g.masked_row_softmax(x, &ones, 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[vec![2f64.ln(), 0.0]]));
        let s = g.masked_row_softmax(x, &ones, 1.0).unwrap();
        assert!(close(g.value(s).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let x = g.constant(t(&[vec![5.0, 9.0]]));
        let s = g.masked_row_softmax(x, &t(&[vec![1.0, 0.0]]), 1.0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn all_zero_mask_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let mask = t(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(g.masked_row_softmax(x, &mask, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn gated_softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, 4, 6);
        let gate = Tensor::new(vec![6], (0..6).map(|_| rng.random_range(0.2..1.5)).collect()).unwrap();
        let w = random(&mut rng, 4, 6);
        let mut mask = vec![true; 24];
        mask[3] = false;
        mask[2 * 6 + 5] = false;
        let mask = Rc::new(mask);
        let bias = Rc::new(vec![0.1, -0.3, 0.0, 0.5, 0.2, -0.1]);
        check_grads(&[logits, gate, w], &|g, v| {
            let spec = SoftmaxSpec::new(0.7).with_mask(mask.clone()).with_col_bias(bias.clone()).with_self_slot(2);
            let s = g.softmax(v[0], Some(v[1]), spec).unwrap();
            let m = g.mul(s, v[2]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn rms_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![2.5, 2.5, 2.5]]));
        let y = g.rms_norm(x, None, 0.0).unwrap();
        assert!(close(g.value(y).data(), &[1.0, 1.0, 1.0], 1e-15));

        let x = g.constant(t(&[vec![3.0, 4.0]]));
        let y = g.rms_norm(x, None, 0.0).unwrap();
        assert!(close(g.value(y).data(), &[0.84853, 1.13137], 1e-5));
    }

    #[test]
    fn rms_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 3, 5)];
        check_grads(&inputs, &|g, v| {
            let y = g.rms_norm(v[0], Some(v[1]), 1e-5).unwrap();
            let m = g.mul(y, v[2]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(elu_plus_one(0.0), 1.0);
        assert_eq!(elu_plus_one(1.0), 2.0);
        assert!((elu_plus_one(-1.0) - (-1f64).exp()).abs() < 1e-15);
        let mut g = Graph::new();
        let table = g.constant(Tensor::identity(3));
        let r = g.gather_rows(table, &[2]).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 1.0]);
        assert!(matches!(g.gather_rows(table, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn pointwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [random(&mut rng, 4, 3), random(&mut rng, 4, 3)];
        check_grads(&inputs, &|g, v| {
            let a = g.gelu(v[0]);
            let b = g.elu_plus_one(v[1]);
            let c = g.mul(a, b).unwrap();
            let d = g.affine(c, 1.5, 0.25);
            g.mean(d)
        });
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy_rows(x, &[1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 4];
        sat[2] = 1e4;
        let x = g.constant(t(&[sat]));
        let l = g.cross_entropy_rows(x, &[2]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        assert!(matches!(g.cross_entropy_rows(x, &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn cross_entropy_equals_kl_from_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random(&mut rng, 3, 5);
        let targets = [4usize, 0, 2];
        let mut onehot = Tensor::zeros(&[3, 5]);
        for (i, &k) in targets.iter().enumerate() {
            onehot.data_mut()[i * 5 + k] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.constant(logits);
        let ce = g.cross_entropy_rows(x, &targets).unwrap();
        let kl = g.kl_divergence_rows(Rc::new(onehot), x).unwrap();
        assert!((g.value(ce).item() - g.value(kl).item()).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let q = t(&[vec![0.3, -1.2, 2.0]]);
        let p = softmax_rows(&q);
        let x = g.constant(q);
        let kl = g.kl_divergence_rows(Rc::new(p), x).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);

        let uniform = g.constant(Tensor::zeros(&[1, 2]));
        let kl = g.kl_divergence_rows(Rc::new(t(&[vec![1.0, 0.0]])), uniform).unwrap();
        assert!((g.value(kl).item() - 2f64.ln()).abs() < 1e-15);
        let kl = g.kl_divergence_rows(Rc::new(t(&[vec![0.5, 0.5]])), uniform).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);

        let bad = Rc::new(t(&[vec![1.5, -0.5]]));
        assert!(matches!(g.kl_divergence_rows(bad, uniform), Err(Error::Precondition(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Rc::new(softmax_rows(&random(&mut rng, 3, 4)));
        let inputs = [random(&mut rng, 3, 4)];
        check_grads(&inputs, &|g, v| {
            let a = g.cross_entropy_rows(v[0], &[0, 3, 1]).unwrap();
            let b = g.kl_divergence_rows(p.clone(), v[0]).unwrap();
            let c = g.add(a, b).unwrap();
            g.scale(c, 0.5)
        });
    }

    #[test]
    fn row_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inputs = [random(&mut rng, 3, 4), random(&mut rng, 3, 4), Tensor::scalar(0.7), random(&mut rng, 1, 4)];
        check_grads(&inputs, &|g, v| {
            let a = g.row_normalize(v[0]).unwrap();
            let b = g.mul_scalar(v[1], v[2]).unwrap();
            let b = g.add_row(b, v[3]).unwrap();
            let d = g.row_dot(a, b).unwrap();
            let e = g.elu_plus_one(v[1]);
            let s = g.row_sum(e);
            let q = g.div_rows(b, s).unwrap();
            let c = g.concat_cols(&[d, q]).unwrap();
            let c = g.slice_cols(c, 1, 3).unwrap();
            let top = g.slice_rows(c, 1, 2).unwrap();
            let both = g.concat_rows(&[top, top]).unwrap();
            let sq = g.mul(both, both).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn backward_of_sum_is_all_ones_and_unreachable_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let unused = g.param(Tensor::zeros(&[4]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
        assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ste_forward_is_hard_and_backward_is_identity() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![0.9, 0.1]).unwrap());
        let m = g.ste_gate(p, 0.5);
        assert_eq!(g.value(m).data(), &[1.0, 0.0]);
        let s = g.sum(m);
        assert_eq!(g.backward(s).unwrap().wrt(p).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 6, 5);
        let b = random(&mut rng, 5, 6);
        let run = || {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let y = g.param(b.clone());
            let p = g.matmul(x, y).unwrap();
            let s = g.softmax(p, None, SoftmaxSpec::new(0.3).with_mask(causal_mask(6, 6, 0))).unwrap();
            let l = g.cross_entropy_rows(s, &[0, 1, 2, 3, 4, 5]).unwrap();
            let gr = g.backward(l).unwrap();
            (gr.wrt(x), gr.wrt(y))
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masked_softmax_rows_are_distributions(
                vals in proptest::collection::vec(-30.0f64..30.0, 12),
                bits in proptest::collection::vec(any::<bool>(), 12),
                scale in 0.01f64..3.0,
            ) {
                let mut bits = bits;
                for i in 0..3 {
                    bits[i * 4 + i] = true;
                }
                let mask = Tensor::new(vec![3, 4], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
                let s = g.masked_row_softmax(x, &mask, scale).unwrap();
                let y = g.value(s);
                for i in 0..3 {
                    let row = y.row(i);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..4 {
                        prop_assert!(row[j] >= 0.0);
                        if !bits[i * 4 + j] {
                            prop_assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}
