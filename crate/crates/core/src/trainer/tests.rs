use super::*;
use crate::data::{blobs, BlobsConfig};
use crate::model::Architecture;
use proptest::prelude::*;

fn toy_data(seed: u64) -> (Dataset<f64>, Dataset<f64>) {
    let cfg = BlobsConfig {
        classes: 4,
        dim: 4,
        train_per_class: 24,
        test_per_class: 8,
        spread: 0.6,
        center_scale: 2.0,
    };
    blobs(&cfg, seed).unwrap()
}

fn quick_cfg() -> SrilConfig {
    SrilConfig {
        epochs: 3,
        batch_size: 16,
        lr0: 0.05,
        k: 2,
        ..SrilConfig::default()
    }
}

fn fresh_model(classes: usize, cfg: &SrilConfig) -> Model<f64> {
    let mut rng = SeedTree::new(cfg.seed).rng(Stream::Init, 0);
    Model::new(
        Architecture::MlpS { input_dim: 4 },
        classes,
        cfg.k,
        cfg.margin,
        &mut rng,
    )
    .unwrap()
}

/// Task 0 trained on classes {0, 1}; returns the pair for task 1 and the
/// task-1 training set (new classes plus a few old samples).
fn second_task(cfg: &SrilConfig) -> (ModelPair<f64>, Dataset<f64>, TaskState) {
    let (train, _) = toy_data(3);
    let first = train.subset(&train.indices_where(|y| y < 2));
    let mut model = fresh_model(2, cfg);
    let st0 = TaskState::new(0, 2, 2, cfg).unwrap();
    train_task(&mut model, None, &first, cfg, &st0, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    let mut rng = SeedTree::new(cfg.seed).rng(Stream::HeadExpansion, 1);
    let pair = ModelPair::for_next_task(&model, 2, &mut rng).unwrap();
    let mut idx = train.indices_where(|y| y >= 2);
    idx.extend(train.indices_where(|y| y < 2).into_iter().step_by(6));
    let st1 = TaskState::new(1, 2, 4, cfg).unwrap();
    (pair, train.subset(&idx), st1)
}

#[test]
fn confidence_examples() {
    let p7 = (0.7f64 / 0.3).ln();
    let logits = Tensor::new(vec![2, 2], vec![0.0, 0.0, p7, 0.0]).unwrap();
    assert!((confidence_from_logits(&logits, 1.0, &[0, 0]).unwrap() - 0.6).abs() < 1e-12);
    let onehot = Tensor::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
    assert_eq!(confidence_from_logits(&onehot, 1.0, &[1]).unwrap(), 1.0);
    let uniform = Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap();
    assert!((confidence_from_logits(&uniform, 1.0, &[2]).unwrap() - 0.25).abs() < 1e-15);
    let empty = Tensor::<f64>::zeros(&[0, 4]);
    assert!(matches!(
        confidence_from_logits(&empty, 1.0, &[]),
        Err(TrainError::EmptySet)
    ));
}

#[test]
fn confidence_uses_scaled_logits() {
    let logits = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let c1 = confidence_from_logits(&logits, 1.0, &[0]).unwrap();
    let c3 = confidence_from_logits(&logits, 3.0, &[0]).unwrap();
    assert!((c1 - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((c3 - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
}

#[test]
fn gate_examples() {
    assert_eq!(cwi_gate(0.9, 0.7, 0.15, 0.995), 0.995);
    assert_eq!(cwi_gate(0.9, 0.8, 0.15, 0.995), 1.0);
    assert_eq!(cwi_gate(0.75, 0.5, 0.25, 0.995), 0.995);
}

#[test]
fn delta_examples() {
    assert!((delta_threshold(0.1, 10, 60) - 1.0 / 6.0).abs() < 1e-15);
    assert!((delta_threshold(0.1, 1, 51) - 1.961e-3).abs() < 1e-6);
    assert_eq!(delta_threshold(0.0, 5, 20), 0.0);
    let st = TaskState::new(1, 10, 60, &SrilConfig::default()).unwrap();
    assert!((st.lambda_gfd_t - 2.0 * 6f64.sqrt()).abs() < 1e-12);
    assert_eq!(st.n_old(), 50);
}

#[test]
fn cwi_apply_examples() {
    let cfg = quick_cfg();
    let old = fresh_model(2, &cfg);
    let mut rng = SeedTree::new(9).rng(Stream::Init, 0);
    let mut new = fresh_model(2, &cfg);
    new.expand_head(1, &mut rng).unwrap();
    let untouched = new.clone();

    let mut m = new.clone();
    cwi_apply(&mut m, &old, 1.0).unwrap();
    assert_eq!(m, untouched);

    let mut m = new.clone();
    for s in &mut m.backbone.stages {
        s.weight.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    cwi_apply(&mut m, &old, 0.0).unwrap();
    for (a, b) in m.backbone.stages.iter().zip(&old.backbone.stages) {
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
    }
    let shared = old.head.proxies.numel();
    assert_eq!(&m.head.proxies.data()[..shared], old.head.proxies.data());
    assert_eq!(
        &m.head.proxies.data()[shared..],
        &untouched.head.proxies.data()[shared..]
    );
    assert_eq!(m.head.eta, old.head.eta);

    let mut a = old.clone();
    let mut b = old.clone();
    a.backbone.stages[0].bias.data_mut()[..2].copy_from_slice(&[2.0, 0.0]);
    b.backbone.stages[0].bias.data_mut()[..2].copy_from_slice(&[0.0, 2.0]);
    cwi_apply(&mut a, &b, 0.5).unwrap();
    assert_eq!(&a.backbone.stages[0].bias.data()[..2], &[1.0, 1.0]);
}

#[test]
fn cwi_apply_rejects_misaligned() {
    let cfg = quick_cfg();
    let mut small = fresh_model(2, &cfg);
    let big = fresh_model(3, &cfg);
    assert!(matches!(
        cwi_apply(&mut small, &big, 0.5),
        Err(TrainError::Misaligned(_))
    ));
    let mut rng = SeedTree::new(0).rng(Stream::Init, 0);
    let other = Model::new(Architecture::MlpS { input_dim: 5 }, 2, cfg.k, cfg.margin, &mut rng).unwrap();
    assert!(cwi_apply(&mut small, &other, 0.5).is_err());
}

#[test]
fn config_validation_and_defaults() {
    let cfg = SrilConfig::default();
    cfg.validate().unwrap();
    assert_eq!((cfg.alpha, cfg.lambda_th, cfg.lambda_gfd), (0.995, 0.1, 2.0));
    for bad in [
        SrilConfig {
            alpha: 1.5,
            ..cfg.clone()
        },
        SrilConfig {
            lambda_th: -0.1,
            ..cfg.clone()
        },
        SrilConfig {
            lambda_gfd: f64::NAN,
            ..cfg.clone()
        },
        SrilConfig {
            epochs: 0,
            ..cfg.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
    let parsed: SrilConfig = serde_json::from_str(r#"{"distill_mode":"sfd","cwi_enabled":false}"#).unwrap();
    assert_eq!(parsed.distill_mode, DistillMode::Sfd);
    assert_eq!(parsed.epochs, 160);
    assert!(serde_json::from_str::<SrilConfig>(r#"{"alpah":1}"#).is_err());
}

/// Minimal supervised loop written directly against the tape and optimizer.
fn plain_reference(model: &mut Model<f64>, data: &Dataset<f64>, cfg: &SrilConfig) -> Vec<f64> {
    let mut rng = SeedTree::new(cfg.seed).rng(Stream::Shuffle, 0);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr0 / 2.0 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(data.inputs.select_rows(chunk));
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let fwd = model.forward(&mut tape, &params, x).unwrap();
            let loss = tape.lsc_loss(fwd.logits, params.eta(), &y, cfg.margin).unwrap();
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss, &mut []).unwrap();
            let g: Vec<&[f64]> = params.vars.iter().map(|&v| grads.wrt(v).unwrap()).collect();
            let mut p: Vec<&mut [f64]> = model.params_mut().into_iter().map(|t| t.data_mut()).collect();
            let hp = SgdParams {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            sgd_step(&mut p, &g, &mut velocity, hp).unwrap();
            model.head.normalize_proxies();
        }
    }
    losses
}

#[test]
fn first_task_matches_plain_training_bitwise() {
    let cfg = SrilConfig {
        distill_mode: DistillMode::None,
        cwi_enabled: false,
        ..quick_cfg()
    };
    let (train, _) = toy_data(1);
    let mut a = fresh_model(4, &cfg);
    let mut b = a.clone();
    let st = TaskState::new(0, 4, 4, &cfg).unwrap();
    let report = train_task(&mut a, None, &train, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    let reference = plain_reference(&mut b, &train, &cfg);
    let trace: Vec<f64> = report.steps.iter().map(|s| s.cls_loss).collect();
    assert_eq!(trace.len(), reference.len());
    assert!(trace.iter().zip(&reference).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a, b);
    assert!(report
        .steps
        .iter()
        .all(|s| s.total_loss == s.cls_loss && s.conf_old_model.is_none()));
}

#[test]
fn training_lowers_loss() {
    let cfg = SrilConfig {
        epochs: 8,
        ..quick_cfg()
    };
    let (train, _) = toy_data(2);
    let mut m = fresh_model(4, &cfg);
    let st = TaskState::new(0, 4, 4, &cfg).unwrap();
    let r = train_task(&mut m, None, &train, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    let per_epoch = |e: usize| {
        let v: Vec<f64> = r.steps.iter().filter(|s| s.epoch == e).map(|s| s.cls_loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(per_epoch(7) < per_epoch(0));
}

#[derive(Default)]
struct SafetyCheck {
    events: usize,
    worst: f64,
}

impl TrainObserver<f64> for SafetyCheck {
    fn after_cwi(&mut self, before: &Model<f64>, after: &Model<f64>, old: &Model<f64>, _beta: f64) {
        self.events += 1;
        let old_params = old.params();
        for (i, (b, a)) in before.params().iter().zip(after.params()).enumerate() {
            let o = old_params[i].data();
            for (j, (&bv, &av)) in b.data().iter().zip(a.data()).enumerate() {
                let ov = if j < o.len() { o[j] } else { bv };
                let (lo, hi) = (bv.min(ov), bv.max(ov));
                let excess = (lo - av).max(av - hi).max(0.0);
                self.worst = self.worst.max(excess);
            }
        }
    }
}

#[test]
fn interpolated_weights_stay_on_segment() {
    let cfg = SrilConfig {
        lambda_th: 0.0,
        ..quick_cfg()
    };
    let (mut pair, data, st) = second_task(&cfg);
    let mut check = SafetyCheck::default();
    let r = train_pair(&mut pair, &data, &cfg, &st, BatchPlan::Shuffle, &mut check).unwrap();
    assert!(check.events > 0);
    assert_eq!(check.events, r.gate_events());
    assert!(check.worst <= 1e-15, "{}", check.worst);
}

#[test]
fn previous_model_is_untouched() {
    let cfg = quick_cfg();
    let (mut pair, data, st) = second_task(&cfg);
    let before = pair.old().fingerprint();
    train_pair(&mut pair, &data, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    assert_eq!(pair.old().fingerprint(), before);
    assert_ne!(pair.new.fingerprint(), before);
}

#[test]
fn batches_without_old_samples_skip_the_gate() {
    let cfg = SrilConfig {
        lambda_th: 0.0,
        ..quick_cfg()
    };
    let (mut pair, data, st) = second_task(&cfg);
    let only_new = data.subset(&data.indices_where(|y| y >= 2));
    let r = train_pair(&mut pair, &only_new, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    for s in &r.steps {
        assert_eq!(s.n_old, 0);
        assert!(s.conf_old_model.is_none() && !s.gate_fired && !s.cwi_applied);
        assert!(s.gfd_loss >= 0.0);
    }
}

#[test]
fn old_only_batches_use_fd_on_old_partition() {
    let cfg = quick_cfg();
    let (mut pair, data, st) = second_task(&cfg);
    let only_old = data.subset(&data.indices_where(|y| y < 2));
    let r = train_pair(&mut pair, &only_old, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    for s in &r.steps {
        assert_eq!(s.n_new, 0);
        assert!(s.mask_rate.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }
    assert!(r.steps.iter().skip(1).any(|s| s.gfd_loss > 0.0));
}

#[test]
fn four_ablations_are_reachable() {
    for mode in [DistillMode::Sfd, DistillMode::Gfd] {
        for cwi in [false, true] {
            let cfg = SrilConfig {
                distill_mode: mode,
                cwi_enabled: cwi,
                lambda_th: 0.0,
                ..quick_cfg()
            };
            let (mut pair, data, st) = second_task(&cfg);
            let r = train_pair(&mut pair, &data, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
            assert_eq!(r.gate_events() > 0, cwi);
            for s in &r.steps {
                let rates = s.mask_rate.as_ref().unwrap();
                assert_eq!(rates.len(), 3);
                assert!(rates.iter().all(|&v| (0.0..=1.0).contains(&v)));
                if mode == DistillMode::Sfd {
                    assert!(rates.iter().all(|&v| v == 1.0));
                }
                let expect = s.cls_loss + st.lambda_gfd_t * s.gfd_loss;
                assert!((s.total_loss - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }
}

#[test]
fn replay_reproduces_a_run() {
    let cfg = quick_cfg();
    let (pair, data, st) = second_task(&cfg);
    let mut a = pair.clone();
    let mut b = pair;
    let ra = train_pair(&mut a, &data, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    let rb = train_pair(
        &mut b,
        &data,
        &cfg,
        &st,
        BatchPlan::Replay(&ra.batches),
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.new, b.new);
}

/// With momentum and weight decay off and no distillation, the step after
/// an interpolation must equal plain gradient descent from the interpolated
/// weights.
#[test]
fn interpolation_precedes_the_gradient() {
    struct Capture(Option<Model<f64>>);
    impl TrainObserver<f64> for Capture {
        fn after_cwi(&mut self, _: &Model<f64>, after: &Model<f64>, _: &Model<f64>, _: f64) {
            if self.0.is_none() {
                self.0 = Some(after.clone());
            }
        }
    }
    let base = SrilConfig {
        lambda_th: 0.0,
        distill_mode: DistillMode::None,
        momentum: 0.0,
        weight_decay: 0.0,
        ..quick_cfg()
    };
    let (pair, data, st) = second_task(&base);
    let cfg = SrilConfig { epochs: 1, ..base };
    let batches = vec![BatchRecord {
        epoch: 0,
        indices: (0..data.len()).collect(),
    }];
    let mut p = pair.clone();
    let mut cap = Capture(None);
    let r = train_pair(&mut p, &data, &cfg, &st, BatchPlan::Replay(&batches), &mut cap).unwrap();
    assert!(r.steps[0].cwi_applied);
    let mut expect = cap.0.unwrap();
    let mut tape = Tape::new();
    let params = expect.bind(&mut tape, true);
    let x = tape.constant(data.inputs.clone());
    let fwd = expect.forward(&mut tape, &params, x).unwrap();
    let loss = tape
        .lsc_loss(fwd.logits, params.eta(), &data.labels, cfg.margin)
        .unwrap();
    assert_eq!(tape.value(loss).item(), r.steps[0].cls_loss);
    let grads = tape.backward(loss, &mut []).unwrap();
    let gs: Vec<Vec<f64>> = params.vars.iter().map(|&v| grads.wrt(v).unwrap().to_vec()).collect();
    for (t, g) in expect.params_mut().into_iter().zip(&gs) {
        for (v, gv) in t.data_mut().iter_mut().zip(g) {
            *v -= cfg.lr0 * gv;
        }
    }
    expect.head.normalize_proxies();
    for (a, b) in p.new.params().iter().zip(expect.params()) {
        assert!(a.max_abs_diff(b) < 1e-14);
    }
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let cfg = quick_cfg();
    let (train, _) = toy_data(1);
    let mut bad = train.clone();
    bad.inputs.data_mut()[0] = f64::NAN;
    let mut m = fresh_model(4, &cfg);
    let st = TaskState::new(0, 4, 4, &cfg).unwrap();
    let batches = vec![
        BatchRecord {
            epoch: 0,
            indices: vec![1, 2, 3],
        },
        BatchRecord {
            epoch: 0,
            indices: vec![0, 1],
        },
    ];
    match train_task(
        &mut m,
        None,
        &bad,
        &cfg,
        &st,
        BatchPlan::Replay(&batches),
        &mut NoObserver,
    ) {
        Err(TrainError::NonFiniteLoss(rec)) => assert_eq!(rec.step, 1),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn rejects_mismatched_heads_and_labels() {
    let cfg = quick_cfg();
    let (train, _) = toy_data(1);
    let mut m = fresh_model(3, &cfg);
    let st = TaskState::new(0, 4, 4, &cfg).unwrap();
    assert!(train_task(&mut m, None, &train, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).is_err());
    let st3 = TaskState::new(0, 3, 3, &cfg).unwrap();
    assert!(train_task(&mut m, None, &train, &cfg, &st3, BatchPlan::Shuffle, &mut NoObserver).is_err());
}

#[test]
fn gate_events_shrink_with_threshold_on_a_replayed_run() {
    let cfg = quick_cfg();
    let (pair, data, st) = second_task(&cfg);
    let mut probe = pair.clone();
    let recorded = train_pair(&mut probe, &data, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    let mut last = usize::MAX;
    for lambda_th in [0.0, 0.02, 0.1, 0.5, 5.0] {
        let cfg = SrilConfig {
            lambda_th,
            ..cfg.clone()
        };
        let st = TaskState::new(1, 2, 4, &cfg).unwrap();
        let mut p = pair.clone();
        let r = train_pair(
            &mut p,
            &data,
            &cfg,
            &st,
            BatchPlan::Replay(&recorded.batches),
            &mut NoObserver,
        )
        .unwrap();
        assert!(
            r.gate_events() <= last,
            "λ_th={lambda_th}: {} > {last}",
            r.gate_events()
        );
        last = r.gate_events();
    }
    assert_eq!(last, 0);
}

proptest! {
    #[test]
    fn gate_count_is_monotone_in_threshold(
        gaps in proptest::collection::vec(-1.0f64..1.0, 0..64),
        a in 0.0f64..2.0,
        b in 0.0f64..2.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let count = |l: f64| gaps.iter().filter(|&&g| cwi_gate(g, 0.0, delta_threshold(l, 2, 4), 0.9) < 1.0).count();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn interpolation_is_convex(beta in 0.0f64..=1.0, seed in 0u64..50) {
        let cfg = quick_cfg();
        let mut rng = SeedTree::new(seed).rng(Stream::Init, 0);
        let old = Model::<f64>::new(Architecture::MlpS { input_dim: 3 }, 2, 2, 0.6, &mut rng).unwrap();
        let mut new = Model::<f64>::new(Architecture::MlpS { input_dim: 3 }, 2, 2, 0.6, &mut rng).unwrap();
        new.expand_head(1, &mut rng).unwrap();
        let before = new.clone();
        cwi_apply(&mut new, &old, beta).unwrap();
        let mut check = SafetyCheck::default();
        check.after_cwi(&before, &new, &old, beta);
        prop_assert!(check.worst <= 1e-15);
        let _ = cfg;
    }
}
