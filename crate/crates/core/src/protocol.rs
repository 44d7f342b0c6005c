//! Class-incremental protocol: task splits, herding exemplars and the two
//! evaluation heads.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{Model, ModelError};
use crate::rng::{SeedTree, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("cannot split {num_classes} classes into an initial task of {initial} plus tasks of {increment}")]
    Tiling {
        num_classes: usize,
        initial: usize,
        increment: usize,
    },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("class {0} has no exemplars")]
    NoExemplars(usize),
    #[error("exemplar store belongs to dataset {stored:?}, not {given:?}")]
    DatasetMismatch { stored: String, given: String },
    #[error("exemplar store {path}: {msg}")]
    Persist { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, ProtocolError>;

/// Seeded class order cut into an initial task and equal increments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    /// `class_order[i]` is the original label learned at position `i`.
    pub class_order: Vec<usize>,
    pub initial_task_size: usize,
    pub increment: usize,
    /// Original labels of each task.
    pub tasks: Vec<Vec<usize>>,
}

pub fn build_scenario(num_classes: usize, initial: usize, increment: usize, seed: u64) -> Result<Scenario> {
    let rest = num_classes.checked_sub(initial);
    let tiles = match rest {
        Some(0) => initial > 0,
        Some(r) => initial > 0 && increment > 0 && r % increment == 0,
        None => false,
    };
    if !tiles {
        return Err(ProtocolError::Tiling {
            num_classes,
            initial,
            increment,
        });
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut SeedTree::new(seed).rng(Stream::ClassOrder, 0));
    let mut tasks = vec![class_order[..initial].to_vec()];
    tasks.extend(class_order[initial..].chunks(increment.max(1)).map(<[usize]>::to_vec));
    Ok(Scenario {
        class_order,
        initial_task_size: initial,
        increment,
        tasks,
    })
}

impl Scenario {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Tasks including the initial one.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Incremental tasks after the initial one.
    pub fn num_increments(&self) -> usize {
        self.tasks.len() - 1
    }

    /// `label_map()[original] = incremental label`.
    pub fn label_map(&self) -> Vec<usize> {
        let mut map = vec![0; self.class_order.len()];
        for (pos, &c) in self.class_order.iter().enumerate() {
            map[c] = pos;
        }
        map
    }

    /// Incremental labels of task `t`.
    pub fn task_range(&self, t: usize) -> Range<usize> {
        let start = self.n_seen(t) - self.tasks[t].len();
        start..self.n_seen(t)
    }

    pub fn n_task(&self, t: usize) -> usize {
        self.tasks[t].len()
    }

    /// Classes seen once task `t` has been learned.
    pub fn n_seen(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(Vec::len).sum()
    }

    /// Task that introduces incremental label `y`.
    pub fn task_of(&self, y: usize) -> usize {
        (0..self.num_tasks())
            .find(|&t| self.task_range(t).contains(&y))
            .expect("label within the scenario")
    }
}

/// Greedy mean-matching order over L2-normalized `features` (n, d): step `k`
/// adds the unchosen sample that brings the running mean closest to the
/// class mean. Ties go to the lowest index.
pub fn herding_select<S: Scalar>(features: &Tensor<S>, m: usize) -> Result<Vec<usize>> {
    let (n, d) = (features.shape()[0], features.shape().get(1).copied().unwrap_or(0));
    if n == 0 {
        return Err(ProtocolError::EmptyClass(0));
    }
    let rows: Vec<&[S]> = features.data().chunks(d.max(1)).collect();
    let mut mu = vec![0.0; d];
    for r in &rows {
        for (a, &v) in mu.iter_mut().zip(r.iter()) {
            *a += v.as_f64();
        }
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);
    let mut acc = vec![0.0; d];
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(m.min(n));
    for k in 1..=m.min(n) {
        let inv = 1.0 / k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(&acc)
                .zip(r.iter())
                .map(|((&u, &a), &v)| {
                    let diff = u - (a + v.as_f64()) * inv;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("an unchosen sample remains");
        chosen[pick] = true;
        for (a, &v) in acc.iter_mut().zip(rows[pick].iter()) {
            *a += v.as_f64();
        }
        order.push(pick);
    }
    Ok(order)
}

/// Embeddings of every row of `inputs`, computed in independent chunks.
pub fn embed<S: Scalar>(model: &Model<S>, inputs: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    const CHUNK: usize = 256;
    let n = inputs.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            model.infer(&inputs.select_rows(&rows))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (d, c) = (model.arch().embed_dim(), model.num_classes());
    let mut emb = Vec::with_capacity(n * d);
    let mut logits = Vec::with_capacity(n * c);
    for p in parts {
        emb.extend_from_slice(p.embedding.data());
        logits.extend_from_slice(p.logits.data());
    }
    Ok((
        Tensor::new(vec![n, d], emb).expect("rows of width d"),
        Tensor::new(vec![n, c], logits).expect("rows of width c"),
    ))
}

/// Per-class herding-ordered sample indices into one training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub dataset_id: String,
    pub budget: usize,
    pub classes: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new(dataset_id: impl Into<String>, budget: usize) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            budget,
            classes: BTreeMap::new(),
        }
    }

    /// All stored indices, class by class.
    pub fn indices(&self) -> Vec<usize> {
        self.classes.values().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shrinks every list to its first `m` entries.
    pub fn truncate(&mut self, m: usize) {
        self.budget = m;
        self.classes.values_mut().for_each(|v| v.truncate(m));
    }

    /// Herds up to `m` exemplars for each class in `new_classes` from `data`
    /// using `model` embeddings; existing lists are only truncated.
    pub fn update<S: Scalar>(
        &mut self,
        model: &Model<S>,
        data: &Dataset<S>,
        new_classes: Range<usize>,
        m: usize,
    ) -> Result<()> {
        self.check_dataset(data)?;
        self.truncate(m);
        for c in new_classes {
            let idx = data.indices_where(|y| y == c);
            if idx.is_empty() {
                return Err(ProtocolError::EmptyClass(c));
            }
            let (emb, _) = embed(model, &data.inputs.select_rows(&idx))?;
            let order = herding_select(&emb, m)?;
            self.classes.insert(c, order.into_iter().map(|i| idx[i]).collect());
        }
        Ok(())
    }

    fn check_dataset<S>(&self, data: &Dataset<S>) -> Result<()> {
        if self.dataset_id != data.id {
            return Err(ProtocolError::DatasetMismatch {
                stored: self.dataset_id.clone(),
                given: data.id.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |msg: String| ProtocolError::Persist {
            path: path.display().to_string(),
            msg,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |msg: String| ProtocolError::Persist {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Normalized mean of normalized exemplar embeddings for classes
    /// `0..num_classes`, as rows of a (num_classes, D) tensor.
    pub fn class_means<S: Scalar>(&self, model: &Model<S>, data: &Dataset<S>, num_classes: usize) -> Result<Tensor<S>> {
        self.check_dataset(data)?;
        let d = model.arch().embed_dim();
        let mut means = Vec::with_capacity(num_classes * d);
        for c in 0..num_classes {
            let idx = self
                .classes
                .get(&c)
                .filter(|v| !v.is_empty())
                .ok_or(ProtocolError::NoExemplars(c))?;
            let (emb, _) = embed(model, &data.inputs.select_rows(idx))?;
            let mut mean = vec![S::zero(); d];
            for row in emb.data().chunks(d) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let norm = mean.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm > S::zero() {
                mean.iter_mut().for_each(|v| *v /= norm);
            }
            means.extend(mean);
        }
        Ok(Tensor::new(vec![num_classes, d], means).expect("num_classes rows"))
    }
}

/// Index of the nearest row of `means` to each L2-normalized embedding,
/// lowest class on ties.
pub fn nearest_mean<S: Scalar>(means: &Tensor<S>, embeddings: &Tensor<S>) -> Vec<usize> {
    let d = means.shape()[1];
    embeddings
        .data()
        .chunks(d.max(1))
        .map(|q| {
            let mut best = (0, S::infinity());
            for (c, m) in means.data().chunks(d.max(1)).enumerate() {
                let dist = q.iter().zip(m).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>();
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows<S: Scalar>(scores: &Tensor<S>) -> Vec<usize> {
    let n = scores.shape()[1];
    scores
        .data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Label predicted by nearest-mean-of-exemplars for a single query input.
pub fn nme_classify<S: Scalar>(
    model: &Model<S>,
    store: &ExemplarStore,
    train: &Dataset<S>,
    query: &Tensor<S>,
) -> Result<usize> {
    let means = store.class_means(model, train, model.num_classes())?;
    let mut shape = vec![1];
    shape.extend_from_slice(query.shape());
    let q = query.clone().reshape(&shape).expect("same element count");
    let (emb, _) = embed(model, &q)?;
    Ok(nearest_mean(&means, &emb)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Cnn,
    Nme,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Cnn => "cnn",
            Head::Nme => "nme",
        }
    }
}

/// Accuracy on each task's test classes and on all seen classes together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task: Vec<f64>,
    pub per_task_count: Vec<usize>,
    pub overall: f64,
}

/// Predicted labels on `test` for one head.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    head: Head,
    store: Option<(&ExemplarStore, &Dataset<S>)>,
    test: &Tensor<S>,
) -> Result<Vec<usize>> {
    let (emb, logits) = embed(model, test)?;
    match head {
        Head::Cnn => Ok(argmax_rows(&logits)),
        Head::Nme => {
            let (store, train) = store.ok_or(ProtocolError::NoExemplars(0))?;
            let means = store.class_means(model, train, model.num_classes())?;
            Ok(nearest_mean(&means, &emb))
        }
    }
}

/// Evaluates after task `t`: `test` holds incremental labels and samples of
/// unseen classes are ignored.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    scenario: &Scenario,
    t: usize,
    head: Head,
    store: Option<(&ExemplarStore, &Dataset<S>)>,
    test: &Dataset<S>,
) -> Result<Evaluation> {
    let seen = scenario.n_seen(t);
    let idx = test.indices_where(|y| y < seen);
    let preds = predict(model, head, store, &test.inputs.select_rows(&idx))?;
    let mut correct = vec![0usize; t + 1];
    let mut count = vec![0usize; t + 1];
    for (&i, &p) in idx.iter().zip(&preds) {
        let y = test.labels[i];
        let task = scenario.task_of(y);
        count[task] += 1;
        correct[task] += usize::from(p == y);
    }
    let ratio = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(Evaluation {
        per_task: correct.iter().zip(&count).map(|(&c, &n)| ratio(c, n)).collect(),
        overall: ratio(correct.iter().sum(), count.iter().sum()),
        per_task_count: count,
    })
}

#[cfg(test)]
mod tests;
