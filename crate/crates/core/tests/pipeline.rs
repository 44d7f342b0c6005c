use std::error::Error;

use sril_core::data::{blobs, BlobsConfig, Dataset};
use sril_core::model::{read_checkpoint, write_checkpoint};
use sril_core::protocol::{build_scenario, evaluate, predict, Evaluation, ExemplarStore, Head, Scenario};
use sril_core::rng::{SeedTree, Stream};
use sril_core::trainer::{train_pair, train_task, BatchPlan, DistillMode, NoObserver, SrilConfig, TaskState};
use sril_core::{Architecture, Model, ModelPair, Scalar, Tensor};

type Res<T> = Result<T, Box<dyn Error>>;

struct Finished<S> {
    model: Model<S>,
    store: ExemplarStore,
    train: Dataset<S>,
    test: Dataset<S>,
    scenario: Scenario,
    cnn: Vec<Evaluation>,
    nme: Vec<Evaluation>,
    gate_events: usize,
}

fn config(mode: DistillMode, cwi: bool) -> SrilConfig {
    SrilConfig {
        epochs: 4,
        batch_size: 32,
        k: 2,
        eta_init: 10.0,
        lambda_gfd: 0.2,
        lambda_th: 0.5,
        distill_mode: mode,
        cwi_enabled: cwi,
        seed: 7,
        ..SrilConfig::default()
    }
}

fn run<S: Scalar>(cfg: &SrilConfig, memory: usize) -> Res<Finished<S>> {
    let data = BlobsConfig {
        classes: 6,
        dim: 4,
        train_per_class: 40,
        test_per_class: 20,
        spread: 1.0,
        center_scale: 3.0,
    };
    let (train, test) = blobs::<S>(&data, cfg.seed)?;
    let scenario = build_scenario(6, 2, 2, cfg.seed)?;
    let map = scenario.label_map();
    let (train, test) = (train.relabel(&map), test.relabel(&map));
    let tree = SeedTree::new(cfg.seed);
    let arch = Architecture::MlpS { input_dim: 4 };

    let mut store = ExemplarStore::new(train.id.clone(), memory);
    let mut model: Option<Model<S>> = None;
    let (mut cnn, mut nme, mut gate_events) = (Vec::new(), Vec::new(), 0);
    for t in 0..scenario.num_tasks() {
        let range = scenario.task_range(t);
        let mut idx = train.indices_where(|y| range.contains(&y));
        idx.extend(store.indices());
        let subset = train.subset(&idx);
        let state = TaskState::new(t, scenario.n_task(t), scenario.n_seen(t), cfg)?;
        let trained = match model.take() {
            None => {
                let mut fresh = Model::new(
                    arch,
                    scenario.n_task(t),
                    cfg.k,
                    cfg.margin,
                    &mut tree.rng(Stream::Init, 0),
                )?;
                fresh.head.eta = Tensor::from_vec(vec![S::from_f64(cfg.eta_init).unwrap()]);
                train_task(
                    &mut fresh,
                    None,
                    &subset,
                    cfg,
                    &state,
                    BatchPlan::Shuffle,
                    &mut NoObserver,
                )?;
                fresh
            }
            Some(prev) => {
                let mut rng = tree.rng(Stream::HeadExpansion, t as u32);
                let mut pair = ModelPair::for_next_task(&prev, scenario.n_task(t), &mut rng)?;
                let report = train_pair(&mut pair, &subset, cfg, &state, BatchPlan::Shuffle, &mut NoObserver)?;
                assert_eq!(pair.old(), &prev, "training must leave the old model untouched");
                gate_events += report.gate_events();
                pair.into_parts().1
            }
        };
        store.update(&trained, &train, range, memory)?;
        cnn.push(evaluate(&trained, &scenario, t, Head::Cnn, None, &test)?);
        nme.push(evaluate(
            &trained,
            &scenario,
            t,
            Head::Nme,
            Some((&store, &train)),
            &test,
        )?);
        model = Some(trained);
    }
    Ok(Finished {
        model: model.unwrap(),
        store,
        train,
        test,
        scenario,
        cnn,
        nme,
        gate_events,
    })
}

#[test]
fn three_tasks_end_to_end() -> Res<()> {
    let f = run::<f64>(&config(DistillMode::Gfd, true), 5)?;
    assert_eq!(f.model.num_classes(), 6);
    assert_eq!(f.store.len(), 6 * 5);
    for (t, e) in f.cnn.iter().enumerate() {
        assert_eq!(e.per_task.len(), t + 1);
        assert_eq!(e.per_task_count, vec![40; t + 1]);
    }
    // The classifier head favors the newest classes on so few exemplars;
    // the nearest-mean head does not.
    let newest = *f.cnn.last().unwrap().per_task.last().unwrap();
    let last_nme = f.nme.last().unwrap().overall;
    assert!(newest > 0.9, "newest task accuracy {newest}");
    assert!(last_nme > 0.6, "nme accuracy {last_nme}");
    assert!(f.cnn[0].overall > 0.9, "first task accuracy {}", f.cnn[0].overall);
    for c in 0..6 {
        let labels: Vec<usize> = f.store.indices().iter().map(|&i| f.train.labels[i]).collect();
        assert_eq!(labels.iter().filter(|&&y| y == c).count(), 5);
    }
    Ok(())
}

#[test]
fn every_ablation_trains() -> Res<()> {
    for mode in [DistillMode::None, DistillMode::Sfd, DistillMode::Gfd] {
        for cwi in [false, true] {
            let f = run::<f64>(&config(mode, cwi), 5)?;
            assert!(f.cnn.last().unwrap().overall.is_finite());
            if !cwi {
                assert_eq!(f.gate_events, 0, "{mode:?} fired the gate with CWI off");
            }
        }
    }
    Ok(())
}

#[test]
fn identical_configs_train_identical_models() -> Res<()> {
    let cfg = config(DistillMode::Gfd, true);
    let (a, b) = (run::<f64>(&cfg, 3)?, run::<f64>(&cfg, 3)?);
    assert_eq!(a.model, b.model);
    assert_eq!(a.store, b.store);
    assert_eq!(a.cnn, b.cnn);
    let other = run::<f64>(&SrilConfig { seed: 8, ..cfg }, 3)?;
    assert_ne!(a.model.fingerprint(), other.model.fingerprint());
    Ok(())
}

#[test]
fn single_precision_pipeline_runs() -> Res<()> {
    let f = run::<f32>(&config(DistillMode::Gfd, true), 5)?;
    assert_eq!(f.model.num_classes(), 6);
    assert!(f.nme.last().unwrap().overall > 0.6);
    Ok(())
}

#[test]
fn checkpoints_and_exemplars_restore_predictions() -> Res<()> {
    let f = run::<f64>(&config(DistillMode::Gfd, true), 4)?;
    let mut bytes = Vec::new();
    write_checkpoint(&f.model, &mut bytes)?;
    let model: Model<f64> = read_checkpoint(&mut bytes.as_slice())?;
    assert_eq!(model, f.model);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("exemplars.json");
    f.store.save(&path)?;
    let store = ExemplarStore::load(&path)?;
    assert_eq!(store, f.store);

    let last = f.scenario.num_tasks() - 1;
    let before = evaluate(
        &f.model,
        &f.scenario,
        last,
        Head::Nme,
        Some((&f.store, &f.train)),
        &f.test,
    )?;
    let after = evaluate(&model, &f.scenario, last, Head::Nme, Some((&store, &f.train)), &f.test)?;
    assert_eq!(before, after);
    assert_eq!(
        predict(&model, Head::Cnn, None, &f.test.inputs)?,
        predict(&f.model, Head::Cnn, None, &f.test.inputs)?
    );
    Ok(())
}

#[test]
fn exemplars_are_bound_to_their_dataset() -> Res<()> {
    let f = run::<f64>(&config(DistillMode::None, false), 2)?;
    let mut other = f.train.clone();
    other.id = "elsewhere".into();
    assert!(evaluate(&f.model, &f.scenario, 2, Head::Nme, Some((&f.store, &other)), &f.test).is_err());
    assert!(predict(&f.model, Head::Nme, None, &f.test.inputs).is_err());
    Ok(())
}
