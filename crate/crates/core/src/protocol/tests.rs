use super::*;
use crate::data::{blobs, BlobsConfig};
use crate::model::Architecture;
use crate::trainer::{train_task, BatchPlan, NoObserver, SrilConfig, TaskState};
use proptest::prelude::*;

fn col(values: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
}

#[test]
fn scenario_sizes() {
    let s = build_scenario(100, 50, 10, 0).unwrap();
    assert_eq!(s.num_tasks(), 6);
    assert_eq!(s.num_increments(), 5);
    let s = build_scenario(8, 2, 2, 0).unwrap();
    assert_eq!(s.num_tasks(), 4);
    let s = build_scenario(10, 4, 6, 0).unwrap();
    assert_eq!(s.num_increments(), 1);
    let s = build_scenario(5, 5, 0, 0).unwrap();
    assert_eq!(s.num_tasks(), 1);
    for (n, i, k) in [(10, 4, 4), (10, 0, 5), (10, 12, 1), (10, 4, 0)] {
        assert!(matches!(build_scenario(n, i, k, 0), Err(ProtocolError::Tiling { .. })));
    }
}

#[test]
fn scenario_is_seeded() {
    let a = build_scenario(20, 10, 5, 3).unwrap();
    assert_eq!(a, build_scenario(20, 10, 5, 3).unwrap());
    assert_ne!(a.class_order, build_scenario(20, 10, 5, 4).unwrap().class_order);
    assert_eq!(a.task_range(2), 15..20);
    assert_eq!(a.n_seen(1), 15);
    let map = a.label_map();
    for (pos, &c) in a.class_order.iter().enumerate() {
        assert_eq!(map[c], pos);
    }
    assert_eq!(a.task_of(14), 1);
}

proptest! {
    #[test]
    fn tasks_partition_the_classes(initial in 1usize..10, inc in 1usize..5, k in 0usize..5, seed in 0u64..100) {
        let n = initial + inc * k;
        let s = build_scenario(n, initial, inc, seed).unwrap();
        let mut all: Vec<usize> = s.tasks.concat();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.num_tasks(), k + 1);
    }

    #[test]
    fn herding_prefixes_are_smaller_selections(values in proptest::collection::vec(-1.0f64..1.0, 2..20), m in 1usize..20) {
        let n = values.len();
        let pts: Vec<f64> = values.iter().flat_map(|&a| [a.cos(), a.sin()]).collect();
        let f = Tensor::new(vec![n, 2], pts).unwrap();
        let full = herding_select(&f, m).unwrap();
        prop_assert_eq!(full.len(), m.min(n));
        for b in 1..=full.len() {
            prop_assert_eq!(&herding_select(&f, b).unwrap()[..], &full[..b]);
        }
        let mut uniq = full.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), full.len());
    }
}

#[test]
fn herding_examples() {
    assert_eq!(herding_select(&col(&[-1.0, 1.0, 1.0]), 1).unwrap(), vec![1]);
    let all = herding_select(&col(&[-1.0, 1.0, 1.0]), 3).unwrap();
    assert_eq!(all, vec![1, 0, 2]);
    let f = col(&[0.1, 0.9, 0.45, 0.2]);
    assert_eq!(herding_select(&f, 1).unwrap(), vec![2]);
    assert!(matches!(
        herding_select(&Tensor::<f64>::zeros(&[0, 2]), 1),
        Err(ProtocolError::EmptyClass(_))
    ));
}

#[test]
fn nearest_mean_examples() {
    let means = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = {
        let n = (0.81f64 + 0.01).sqrt();
        Tensor::new(vec![1, 2], vec![0.9 / n, 0.1 / n]).unwrap()
    };
    assert_eq!(nearest_mean(&means, &q), vec![0]);
    let h = 0.5f64.sqrt();
    let tie = Tensor::new(vec![1, 2], vec![h, h]).unwrap();
    assert_eq!(nearest_mean(&means, &tie), vec![0]);
    let scores = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.5, 0.9, 0.0, 0.9]).unwrap();
    assert_eq!(argmax_rows(&scores), vec![1, 0]);
}

fn setup() -> (Model<f64>, Dataset<f64>, Dataset<f64>, Scenario) {
    let cfg_data = BlobsConfig {
        classes: 4,
        dim: 3,
        train_per_class: 30,
        test_per_class: 20,
        spread: 0.05,
        center_scale: 3.0,
    };
    let (train, test) = blobs::<f64>(&cfg_data, 5).unwrap();
    let scenario = build_scenario(4, 4, 0, 5).unwrap();
    let map = scenario.label_map();
    let (train, test) = (train.relabel(&map), test.relabel(&map));
    let cfg = SrilConfig {
        epochs: 40,
        batch_size: 16,
        lr0: 0.1,
        k: 2,
        ..SrilConfig::default()
    };
    let mut rng = SeedTree::new(0).rng(Stream::Init, 0);
    let mut model = Model::new(Architecture::MlpS { input_dim: 3 }, 4, cfg.k, cfg.margin, &mut rng).unwrap();
    let st = TaskState::new(0, 4, 4, &cfg).unwrap();
    train_task(&mut model, None, &train, &cfg, &st, BatchPlan::Shuffle, &mut NoObserver).unwrap();
    (model, train, test, scenario)
}

#[test]
fn exemplar_store_rules() {
    let (model, train, _, _) = setup();
    let mut store = ExemplarStore::new(train.id.clone(), 20);
    store.update(&model, &train, 0..2, 20).unwrap();
    assert_eq!(store.len(), 40);
    for (&c, list) in &store.classes {
        assert!(list.iter().all(|&i| train.labels[i] == c));
    }
    let before = store.clone();
    store.update(&model, &train, 2..4, 10).unwrap();
    assert_eq!(store.len(), 40);
    for c in 0..2 {
        assert_eq!(store.classes[&c][..], before.classes[&c][..10]);
    }

    let tiny = train.subset(&train.indices_where(|y| y == 0)[..7]);
    let mut small = ExemplarStore::new(tiny.id.clone(), 20);
    small.update(&model, &tiny, 0..1, 20).unwrap();
    assert_eq!(small.classes[&0].len(), 7);

    let other = Dataset {
        id: "other".into(),
        ..train.clone()
    };
    assert!(matches!(
        store.update(&model, &other, 0..1, 5),
        Err(ProtocolError::DatasetMismatch { .. })
    ));
}

#[test]
fn exemplar_store_persists() {
    let (model, train, _, _) = setup();
    let mut store = ExemplarStore::new(train.id.clone(), 5);
    store.update(&model, &train, 0..4, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex.json");
    store.save(&path).unwrap();
    assert_eq!(ExemplarStore::load(&path).unwrap(), store);
}

#[test]
fn both_heads_solve_separable_data() {
    let (model, train, test, scenario) = setup();
    let mut store = ExemplarStore::new(train.id.clone(), 20);
    store.update(&model, &train, 0..4, 20).unwrap();
    let cnn = evaluate(&model, &scenario, 0, Head::Cnn, None, &test).unwrap();
    let nme = evaluate(&model, &scenario, 0, Head::Nme, Some((&store, &train)), &test).unwrap();
    assert_eq!(cnn.overall, 1.0);
    assert_eq!(nme.overall, 1.0);
    assert_eq!(cnn.per_task_count, vec![80]);
    let q = test.inputs.select_rows(&[5]).reshape(&[3]).unwrap();
    assert_eq!(nme_classify(&model, &store, &train, &q).unwrap(), test.labels[5]);
    let empty = ExemplarStore::new(train.id.clone(), 20);
    assert!(matches!(
        evaluate(&model, &scenario, 0, Head::Nme, Some((&empty, &train)), &test),
        Err(ProtocolError::NoExemplars(0))
    ));
}

#[test]
fn untrained_head_is_near_chance() {
    let cfg = BlobsConfig {
        classes: 4,
        dim: 6,
        train_per_class: 1,
        test_per_class: 250,
        spread: 1.0,
        center_scale: 0.0,
    };
    let (_, test) = blobs::<f64>(&cfg, 11).unwrap();
    let scenario = build_scenario(4, 4, 0, 0).unwrap();
    let mut hits = 0.0;
    let trials = 8;
    for s in 0..trials {
        let mut rng = SeedTree::new(s).rng(Stream::Init, 0);
        let model = Model::new(Architecture::MlpS { input_dim: 6 }, 4, 10, 0.6, &mut rng).unwrap();
        hits += evaluate(&model, &scenario, 0, Head::Cnn, None, &test).unwrap().overall;
    }
    // 8000 predictions; the binomial sd at p = 0.25 is under half a point.
    assert!((hits / trials as f64 - 0.25).abs() < 0.05);
}

#[test]
fn evaluation_splits_by_task() {
    let (model, _, test, _) = setup();
    let scenario = build_scenario(4, 2, 2, 5).unwrap();
    let e0 = evaluate(&model, &scenario, 0, Head::Cnn, None, &test).unwrap();
    assert_eq!(e0.per_task.len(), 1);
    assert_eq!(e0.per_task_count, vec![40]);
    let e1 = evaluate(&model, &scenario, 1, Head::Cnn, None, &test).unwrap();
    assert_eq!(e1.per_task_count, vec![40, 40]);
    assert!((e1.overall - (e1.per_task[0] + e1.per_task[1]) / 2.0).abs() < 1e-15);
}
