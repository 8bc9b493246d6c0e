use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
///
/// `decay_mask[i]` selects whether parameter `i` is decayed; pass `None` to
/// decay everything.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    decay_mask: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!("adamw: {} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape_err!("adamw: param {i} shape {:?} vs grad {:?}", p.shape(), g.shape()));
        }
        let decay = if decay_mask.is_none_or(|m| m[i]) { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w *= 1.0 - cfg.lr * decay;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the applied scale (1 when no clipping happened).
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one(0.7);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        adamw_step(&mut [&mut p], &[one(0.0)], &mut st, &cfg, None).unwrap();
        assert_eq!(p.item(), 0.7);
    }

    #[test]
    fn first_step_matches_scalar_hand_trace() {
        // m = 0.1, v = 0.001; bias corrections give m_hat = v_hat = 1,
        // so the step is lr * 1 / (1 + eps).
        let mut p = one(0.0);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut [&mut p], &[one(1.0)], &mut st, &cfg, None).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15, "{} vs {expected}", p.item());
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_decay() {
        let mut p = one(2.0);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        adamw_step(&mut [&mut p], &[one(0.0)], &mut st, &cfg, None).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn decay_mask_exempts_parameters() {
        let mut a = one(1.0);
        let mut b = one(1.0);
        let mut st = AdamState::new(&[&a, &b]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        adamw_step(&mut [&mut a, &mut b], &[one(0.0), one(0.0)], &mut st, &cfg, Some(&[true, false])).unwrap();
        assert!(a.item() < 1.0);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut g = vec![Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut g = vec![one(2.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.5);
        assert_eq!(g[0].item(), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipped_norm_never_exceeds_max(
                vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
                max in 0.01f64..10.0,
            ) {
                let mut g = vec![Tensor::new(vec![vals.len()], vals).unwrap()];
                clip_global_norm(&mut g, max);
                prop_assert!(global_norm(&g) <= max * (1.0 + 1e-12));
            }
        }
    }
}
