use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mlp(classes: usize, k: usize) -> Model<f64> {
    Model::new(Architecture::MlpS { input_dim: 5 }, classes, k, 0.6, &mut rng(1)).unwrap()
}

fn batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

#[test]
fn mlp_tap_shapes() {
    let model = mlp(3, 2);
    let (z, taps) = model.forward_with_taps(&batch(&[4, 5], 2)).unwrap();
    assert_eq!(z.shape(), &[4, 64]);
    assert_eq!(taps.len(), 3);
    for tap in &taps {
        assert_eq!(tap.value.shape(), &[4, 64, 1]);
    }
}

#[test]
fn conv_tap_shapes() {
    let arch = Architecture::ConvS {
        in_channels: 1,
        height: 16,
        width: 16,
    };
    // Each stage halves both extents: 16→8→4→2, spatial = side².
    let mut side = 16;
    let expected: Vec<(usize, usize)> = CONV_CHANNELS
        .iter()
        .map(|&c| {
            side /= 2;
            (c, side * side)
        })
        .collect();
    assert_eq!(expected, vec![(16, 64), (32, 16), (64, 4)]);
    assert_eq!(arch.tap_shapes(), expected);
    let model = Model::<f64>::new(arch, 2, 3, 0.6, &mut rng(3)).unwrap();
    let (z, taps) = model.forward_with_taps(&batch(&[2, 1, 16, 16], 4)).unwrap();
    assert_eq!(z.shape(), &[2, 256]);
    let shapes: Vec<_> = taps.iter().map(|t| t.value.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 16, 64], vec![2, 32, 16], vec![2, 64, 4]]);
}

#[test]
fn conv_rejects_odd_sizes() {
    let arch = Architecture::ConvS {
        in_channels: 1,
        height: 12,
        width: 16,
    };
    assert!(matches!(
        Model::<f64>::new(arch, 2, 1, 0.6, &mut rng(0)),
        Err(ModelError::BadImageSize(12, 16))
    ));
}

#[test]
fn rejects_wrong_input_shape() {
    let model = mlp(2, 1);
    let err = model.forward_with_taps(&batch(&[3, 4], 0)).unwrap_err();
    assert!(matches!(err, ModelError::InputShape { .. }));
}

#[test]
fn forward_is_deterministic() {
    let model = mlp(3, 2);
    let x = batch(&[6, 5], 9);
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(a.taps, b.taps);
    assert_eq!(a.logits, b.logits);
}

#[test]
fn embeddings_are_unit_norm() {
    let model = mlp(3, 2);
    let z = model.infer(&batch(&[32, 5], 5)).unwrap().embedding;
    for row in z.data().chunks(64) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

fn head_with(proxies: Vec<f64>, n: usize, k: usize, d: usize) -> LscHead<f64> {
    LscHead {
        proxies: Tensor::new(vec![n, k, d], proxies).unwrap(),
        eta: Tensor::from_vec(vec![1.0]),
        margin: 0.6,
    }
}

#[test]
fn lsc_single_proxy_is_inner_product() {
    let head = head_with(vec![0.6, 0.8, 1.0, 0.0], 2, 1, 2);
    let z = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(head.logits(&z).unwrap().data(), &[0.8, 0.0]);
}

#[test]
fn lsc_equal_similarities_give_that_value() {
    let head = head_with(vec![0.6, 0.8, 0.6, 0.8], 1, 2, 2);
    let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!((head.logits(&z).unwrap().data()[0] - 0.6).abs() < 1e-15);
}

#[test]
fn lsc_softmax_weighting() {
    // Similarities (0, ln 3): weights (1/4, 3/4), score 0.75·ln 3.
    let ln3 = 3f64.ln();
    let head = head_with(vec![0.0, 1.0, ln3, 0.0], 1, 2, 2);
    let z = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let got = head.logits(&z).unwrap().data()[0];
    assert!((got - 0.75 * ln3).abs() < 1e-15);
    assert!((got - 0.8240).abs() < 1e-4);
}

#[test]
fn expand_head_appends_and_preserves() {
    let mut model = mlp(50, 4);
    let before = model.head.proxies.clone();
    model.expand_head(10, &mut rng(8)).unwrap();
    assert_eq!(model.head.proxies.shape(), &[60, 4, 64]);
    assert_eq!(&model.head.proxies.data()[..before.numel()], before.data());
    for row in model.head.proxies.data().chunks(64) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert!(matches!(
        model.expand_head(0, &mut rng(8)),
        Err(ModelError::EmptyExpansion)
    ));
}

#[test]
fn expansion_preserves_old_logits() {
    let mut model = mlp(4, 3);
    let x = batch(&[5, 5], 11);
    let before = model.infer(&x).unwrap().logits;
    model.expand_head(2, &mut rng(12)).unwrap();
    let after = model.infer(&x).unwrap().logits;
    for (b, row) in after.data().chunks(6).enumerate() {
        assert_eq!(&row[..4], &before.data()[b * 4..b * 4 + 4]);
    }
}

#[test]
fn snapshot_is_independent() {
    let mut model = mlp(3, 2);
    let snap = model.snapshot();
    let x = batch(&[3, 5], 1);
    assert_eq!(model.infer(&x).unwrap().logits, snap.infer(&x).unwrap().logits);
    model.backbone.stages[0].weight.data_mut()[0] += 1.0;
    assert_ne!(model, snap);
    assert_eq!(snap.snapshot(), snap);
    assert_ne!(model.fingerprint(), snap.fingerprint());
}

#[test]
fn model_pair_keeps_old_frozen() {
    let model = mlp(3, 2);
    let pair = ModelPair::for_next_task(&model, 2, &mut rng(4)).unwrap();
    assert_eq!(pair.old(), &model);
    assert_eq!(pair.new.num_classes(), 5);
    assert_eq!(pair.new.backbone, model.backbone);
}

#[test]
fn checkpoint_roundtrip() {
    for model in [
        mlp(3, 2),
        Model::new(
            Architecture::ConvS {
                in_channels: 3,
                height: 8,
                width: 8,
            },
            2,
            1,
            0.25,
            &mut rng(2),
        )
        .unwrap(),
    ] {
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"SRILCKPT");
        let back: Model<f64> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let err = read_checkpoint::<f64>(&mut &b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
    assert!(matches!(err, CheckpointError::BadMagic));
    let mut buf = Vec::new();
    write_checkpoint(&mlp(2, 1), &mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_checkpoint::<f64>(&mut buf.as_slice()).is_err());
}

#[test]
fn f32_model_runs() {
    let model: Model<f32> = mlp(3, 2).cast();
    let x: Tensor<f32> = batch(&[2, 5], 3).cast();
    let out = model.infer(&x).unwrap();
    assert_eq!(out.logits.shape(), &[2, 3]);
    let reference = mlp(3, 2).infer(&batch(&[2, 5], 3)).unwrap();
    for (a, b) in out.logits.data().iter().zip(reference.logits.data()) {
        assert!((f64::from(*a) - b).abs() < 1e-4);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lsc_score_is_convex_combination(seed in 0u64..10_000, k in 1usize..5) {
            let model = Model::<f64>::new(Architecture::MlpS { input_dim: 3 }, 3, k, 0.6, &mut rng(seed)).unwrap();
            let x = batch(&[2, 3], seed + 1);
            let out = model.infer(&x).unwrap();
            let d = model.head.embed_dim();
            for b in 0..2 {
                let z = &out.embedding.data()[b * d..(b + 1) * d];
                for c in 0..3 {
                    let sims: Vec<f64> = (0..k)
                        .map(|j| {
                            let p = &model.head.proxies.data()[(c * k + j) * d..(c * k + j + 1) * d];
                            p.iter().zip(z).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let y = out.logits.data()[b * 3 + c];
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }
}
