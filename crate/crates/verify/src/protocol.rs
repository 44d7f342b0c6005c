//! Exhaustive re-implementations of herding and nearest-mean classification.

use rand::Rng;
use sril_core::data::Dataset;
use sril_core::model::{Architecture, Model};
use sril_core::protocol::{herding_select, predict, ExemplarStore, Head};
use sril_core::rng::{SeedTree, Stream};
use sril_core::Tensor;

use crate::Check;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Greedy selection recomputing every candidate mean from scratch.
pub fn brute_force_herding(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let all: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let mu = mean_of(&all);
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(features.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..features.len() {
            if chosen.contains(&i) {
                continue;
            }
            let mut rows: Vec<&[f64]> = chosen.iter().map(|&c| all[c]).collect();
            rows.push(all[i]);
            let d = dist(&mu, &mean_of(&rows));
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    // Occasional duplicates exercise the lowest-index tie rule.
    if n > 2 && rng.random::<bool>() {
        rows[n - 1] = rows[0].clone();
    }
    rows
}

pub fn check_herding(count: u64) -> Vec<Check> {
    let mut rng = SeedTree::new(2).rng(Stream::Data, 400);
    let mut mismatches = 0;
    for _ in 0..count {
        let (n, d) = (rng.random_range(1..12), rng.random_range(1..5));
        let m = rng.random_range(1..n + 3);
        let rows = random_unit_rows(&mut rng, n, d);
        let t = Tensor::new(vec![n, d], rows.concat()).unwrap();
        mismatches += usize::from(herding_select(&t, m).unwrap() != brute_force_herding(&rows, m));
    }
    vec![Check::new(
        "protocol/herding-vs-brute-force",
        mismatches == 0,
        format!("{count} instances, {mismatches} mismatches"),
    )]
}

/// Nearest class mean with every embedding computed one sample at a time.
pub fn brute_force_nme(
    model: &Model<f64>,
    store: &ExemplarStore,
    train: &Dataset<f64>,
    queries: &Tensor<f64>,
) -> Vec<usize> {
    let embed_one = |t: &Tensor<f64>, i: usize| model.infer(&t.select_rows(&[i])).unwrap().embedding.into_data();
    let means: Vec<Vec<f64>> = (0..model.num_classes())
        .map(|c| {
            let rows: Vec<Vec<f64>> = store.classes[&c].iter().map(|&i| embed_one(&train.inputs, i)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let mean = mean_of(&refs);
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            mean.iter().map(|x| x / norm).collect()
        })
        .collect();
    (0..queries.shape()[0])
        .map(|q| {
            let e = embed_one(queries, q);
            let dists: Vec<f64> = means.iter().map(|m| dist(m, &e)).collect();
            let mut best = 0;
            for (c, &d) in dists.iter().enumerate() {
                if d < dists[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn check_nme(count: u64) -> Vec<Check> {
    let mut mismatches = 0;
    for seed in 0..count {
        let mut rng = SeedTree::new(seed).rng(Stream::Data, 500);
        let classes = rng.random_range(2..5);
        let dim = rng.random_range(2..5);
        let model = Model::new(Architecture::MlpS { input_dim: dim }, classes, 2, 0.6, &mut rng).unwrap();
        let per_class = rng.random_range(1..7);
        let n = classes * per_class;
        let inputs = Tensor::from_fn(&[n, dim], |_| rng.random_range(-2.0..2.0));
        let labels = (0..n).map(|i| i % classes).collect();
        let train = Dataset::new("oracle", inputs, labels).unwrap();
        let mut store = ExemplarStore::new("oracle", 0);
        let budget = rng.random_range(1..6);
        store.update(&model, &train, 0..classes, budget).unwrap();
        let queries = Tensor::from_fn(&[10, dim], |_| rng.random_range(-2.0..2.0));
        let lib = predict(&model, Head::Nme, Some((&store, &train)), &queries).unwrap();
        mismatches += usize::from(lib != brute_force_nme(&model, &store, &train, &queries));
    }
    vec![Check::new(
        "protocol/nme-vs-brute-force",
        mismatches == 0,
        format!("{count} instances, {mismatches} mismatches"),
    )]
}
