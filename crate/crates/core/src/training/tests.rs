use super::*;
use crate::model::ModelConfig;

fn tiny_model() -> Model {
    Model::init(ModelConfig {
        vocab_size: 20,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        router_layers: vec![0, 1],
        seed: 5,
    })
    .unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        d_r: 8,
        peak_lr: 1e-2,
        min_lr: 1e-3,
        warmup_steps: 2,
        total_steps: 6,
        seq_len: 12,
        batch_size: 2,
        log_interval: 2,
        checkpoint_interval: 0,
        val_sequences: 2,
        ..TrainConfig::default()
    }
}

fn stream(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * i + 3 * i) % 20).collect()
}

#[test]
fn mask_loss_is_zero_for_identical_logits() {
    let d = Tensor::from_rows(&[vec![0.1, 2.0, -1.0], vec![0.5, 0.5, 3.0], vec![1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(loss_mask(&d, &d).unwrap(), 0.0);
}

#[test]
fn mask_loss_closed_form() {
    // Saturated teacher against a uniform student: ln 2 at each scored row.
    let d = Tensor::from_rows(&[vec![1e4, 0.0], vec![0.0, 1e4], vec![9.0, 9.0]]).unwrap();
    let m = Tensor::zeros(&[3, 2]);
    assert!((loss_mask(&d, &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn mask_loss_sends_no_gradient_to_the_teacher() {
    let mut g = Graph::new();
    let d = g.param(Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.1], vec![0.0, 0.0]]).unwrap());
    let m = g.param(Tensor::from_rows(&[vec![-0.3, 0.2], vec![0.0, 0.4], vec![2.0, 0.0]]).unwrap());
    let l = loss_mask_graph(&mut g, d, m).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(d).data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(m).data().iter().any(|&v| v != 0.0));
}

fn trace(f: f64, g: f64) -> RouterTrace {
    RouterTrace { p: vec![], mask: vec![], f, g }
}

#[test]
fn budget_loss_reference_values() {
    for (f, g, want) in [(0.5, 0.5, 1.0), (1.0, 1.0, 2.0), (0.0, 0.0, 2.0)] {
        assert!((loss_budget(&[trace(f, g)], 0.5).unwrap() - want).abs() < 1e-12);
    }
    let two = loss_budget(&[trace(1.0, 1.0), trace(0.5, 0.5)], 0.5).unwrap();
    assert!((two - 1.5).abs() < 1e-12);
}

#[test]
fn budget_loss_rejects_bad_inputs() {
    assert!(matches!(loss_budget(&[trace(0.5, 0.5)], 1.0), Err(Error::Config(_))));
    assert!(matches!(loss_budget(&[trace(0.5, 0.5)], 0.0), Err(Error::Config(_))));
    assert!(loss_budget(&[], 0.5).is_err());
}

#[test]
fn budget_loss_is_flat_in_g_at_target_rate() {
    let mut g = Graph::new();
    let gv = g.param(Tensor::scalar(0.3));
    let l = loss_budget_graph(&mut g, &[(0.5, gv)], 0.5).unwrap();
    assert_eq!(g.backward(l).unwrap().wrt(gv).item(), 0.0);
    // Away from the target, the slope is F/rho - (1-F)/(1-rho).
    let mut g = Graph::new();
    let gv = g.param(Tensor::scalar(0.3));
    let l = loss_budget_graph(&mut g, &[(0.8, gv)], 0.5).unwrap();
    assert!((g.backward(l).unwrap().wrt(gv).item() - 1.2).abs() < 1e-12);
}

#[test]
fn anchor_loss_closed_forms() {
    let uniform = Tensor::zeros(&[5, 256]);
    assert!((loss_anchor(&uniform, &[1, 2, 3, 4, 5]).unwrap() - 256f64.ln()).abs() < 1e-12);
    let mut sat = Tensor::zeros(&[3, 4]);
    sat.row_mut(0)[2] = 1e4;
    sat.row_mut(1)[0] = 1e4;
    assert!(loss_anchor(&sat, &[9, 2, 0]).unwrap() < 1e-12);
    assert!(loss_anchor(&Tensor::zeros(&[1, 4]), &[1]).is_err());
}

#[test]
fn anchor_loss_is_shifted_cross_entropy() {
    let logits = Tensor::from_rows(&[vec![0.1, 0.7, -0.4], vec![1.0, -1.0, 0.2], vec![0.0, 0.3, 0.9]]).unwrap();
    let mut g = Graph::new();
    let head = g.constant(Tensor::from_rows(&[logits.row(0).to_vec(), logits.row(1).to_vec()]).unwrap());
    let ce = g.cross_entropy_rows(head, &[2, 0]).unwrap();
    assert_eq!(loss_anchor(&logits, &[1, 2, 0]).unwrap(), g.value(ce).item());
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig { peak_lr: 1e-3, min_lr: 1e-5, warmup_steps: 10, total_steps: 110, ..TrainConfig::default() };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(5, &cfg), 5e-4);
    assert_eq!(lr_at(10, &cfg), 1e-3);
    assert!((lr_at(60, &cfg) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    assert!((lr_at(110, &cfg) - 1e-5).abs() < 1e-18);
    assert_eq!(lr_at(500, &cfg), 1e-5);
}

#[test]
fn fixed_count_policies_ignore_the_budget_weight() {
    let mut cfg = tiny_cfg();
    cfg.policy.kind = PolicyKind::Rand;
    assert_eq!(cfg.effective_lambda_budget(), 0.0);
    cfg.policy.kind = PolicyKind::Router;
    assert_eq!(cfg.effective_lambda_budget(), 0.1);
}

#[test]
fn without_mask_and_budget_the_objective_is_plain_ntp() {
    let cfg = TrainConfig { lambda_mask: 0.0, lambda_budget: 0.0, ..tiny_cfg() };
    let mut state = TrainState::fresh(tiny_model(), &cfg).unwrap();
    assert!(state.routers.is_empty());
    let batch = sample_batch(&stream(200), &cfg, 0).unwrap();
    let ntp: f64 = batch.iter().map(|s| loss_anchor(&state.model.forward_dense(s, None).unwrap().logits, s).unwrap()).sum::<f64>() / 2.0;
    let out = train_step(&mut state, &batch, &cfg).unwrap();
    assert!((out.total - ntp).abs() < 1e-12);
    assert_eq!((out.l_mask, out.l_budget), (0.0, 0.0));
}

#[test]
fn router_training_starts_from_the_dense_model() {
    let cfg = tiny_cfg();
    let mut state = TrainState::fresh(tiny_model(), &cfg).unwrap();
    assert_eq!(state.routers.len(), 2);
    let batch = sample_batch(&stream(200), &cfg, 0).unwrap();
    let out = train_step(&mut state, &batch, &cfg).unwrap();
    assert_eq!(out.l_mask, 0.0);
    for &(f, g) in &out.sites {
        assert_eq!(f, 1.0);
        assert!((g - 1.0).abs() < 1e-15);
    }
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let cfg = TrainConfig { batch_size: 1, lambda_mask: 0.7, lambda_budget: 0.3, lambda_anchor: 1.1, ..tiny_cfg() };
    let mut state = TrainState::fresh(tiny_model(), &cfg).unwrap();
    // Move the routers off their initial point so every term is non-trivial.
    for r in &mut state.routers {
        r.alpha = Tensor::new(vec![1], vec![2.0]).unwrap();
        r.wp.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.3 * ((i % 7) as f64 - 3.0));
    }
    let batch = sample_batch(&stream(200), &cfg, 0).unwrap();
    let out = train_step(&mut state, &batch, &cfg).unwrap();
    assert!(out.l_mask > 0.0 && out.l_budget > 0.0);
    assert_eq!(out.total, 1.1 * out.l_anchor + 0.7 * out.l_mask + 0.3 * out.l_budget);
}

#[test]
fn every_policy_trains_deterministically() {
    for kind in [PolicyKind::Router, PolicyKind::Rand, PolicyKind::Attn] {
        let mut cfg = tiny_cfg();
        cfg.policy.kind = kind;
        let run = || {
            let mut state = TrainState::fresh(tiny_model(), &cfg).unwrap();
            let data = stream(300);
            (0..3).map(|s| train_step(&mut state, &sample_batch(&data, &cfg, s).unwrap(), &cfg).unwrap().total).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run(), "{kind}");
        assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fixed_count_policies_keep_the_requested_fraction() {
    let mut cfg = tiny_cfg();
    cfg.policy.kind = PolicyKind::Attn;
    let mut state = TrainState::fresh(tiny_model(), &cfg).unwrap();
    let out = train_step(&mut state, &sample_batch(&stream(200), &cfg, 0).unwrap(), &cfg).unwrap();
    for &(f, g) in &out.sites {
        assert_eq!((f, g), (0.5, 0.5));
    }
    assert!(out.l_mask > 0.0);
}

#[test]
fn run_logs_each_interval_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_interval: 2, ..tiny_cfg() };
    let data = stream(400);
    let state = TrainState::fresh(tiny_model(), &cfg).unwrap();
    let mut seen = 0;
    let done = train_run(&cfg, state, &data[..300], &data[300..], dir.path(), |_| seen += 1).unwrap();
    assert_eq!(seen, cfg.total_steps / cfg.log_interval);
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let recs: Vec<MetricsRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert!(log.contains("\"F\":") && log.contains("val_masked_nll"));

    // Interrupt an identical run after step 4 and resume it.
    let dir2 = tempfile::tempdir().unwrap();
    let mut b = TrainState::fresh(tiny_model(), &cfg).unwrap();
    for s in 0..4 {
        train_step(&mut b, &sample_batch(&data[..300], &cfg, s).unwrap(), &cfg).unwrap();
    }
    b.save(&dir2.path().join(STATE_FILE)).unwrap();
    let head: String = log.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir2.path().join(METRICS_FILE), head).unwrap();
    let resumed = TrainState::load(&dir2.path().join(STATE_FILE)).unwrap();
    assert_eq!(resumed, b);
    let mut a = resumed.clone();
    let batch = sample_batch(&data[..300], &cfg, 4).unwrap();
    let la = train_step(&mut a, &batch, &cfg).unwrap();
    let lb = train_step(&mut b, &batch, &cfg).unwrap();
    assert_eq!(la, lb);
    let final_state = train_run(&cfg, resumed, &data[..300], &data[300..], dir2.path(), |_| {}).unwrap();
    assert!(final_state == done, "resumed run diverged");
    assert_eq!(std::fs::read(dir2.path().join(METRICS_FILE)).unwrap(), log.as_bytes());
}

#[test]
fn bad_config_is_rejected() {
    let cfg = TrainConfig { seq_len: 1, ..tiny_cfg() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_cfg();
    cfg.policy.rho = 1.5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
