//! Run-level metrics: average incremental accuracy, forgetting,
//! intransigence, linear CKA and per-channel feature shift.

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::objectives::{normalize_tap, ObjectiveError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("accuracy matrix row {row} has {got} entries, expected {expected}")]
    RowLength { row: usize, got: usize, expected: usize },
    #[error("accuracy {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("accuracy matrix is empty")]
    Incomplete,
    #[error("forgetting needs at least two tasks")]
    SingleTask,
    #[error("reference accuracies cover {got} tasks, expected {expected}")]
    MissingReference { got: usize, expected: usize },
    #[error("CKA inputs need the same number (≥ 2) of rows, got {0} and {1}")]
    CkaShape(usize, usize),
    #[error("CKA input has zero variance")]
    ZeroVariance,
    #[error("layer {layer} out of range ({layers} taps)")]
    Layer { layer: usize, layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// `rows[k][j]`: accuracy on task `j`'s test classes after learning task
/// `k` (`j ≤ k`). `task_weights[j]` is the number of test samples of task
/// `j`, used to pool per-task accuracies into accuracy over all seen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub task_weights: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(task_weights: Vec<f64>) -> Self {
        Self {
            rows: Vec::new(),
            task_weights,
        }
    }

    /// Builds a matrix from complete rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, task_weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(task_weights);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected || expected > self.task_weights.len() {
            return Err(MetricsError::RowLength {
                row: self.rows.len(),
                got: row.len(),
                expected,
            });
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricsError::OutOfRange(bad));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy over all classes seen after task `k`.
    pub fn seen_accuracy(&self, k: usize) -> f64 {
        let w = &self.task_weights[..=k];
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        self.rows[k].iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / total
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(k, r)| r[k]).collect()
    }
}

/// Mean over tasks of the accuracy on all classes seen so far.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    if m.rows.is_empty() {
        return Err(MetricsError::Incomplete);
    }
    Ok((0..m.num_tasks()).map(|k| m.seen_accuracy(k)).sum::<f64>() / m.num_tasks() as f64)
}

/// Forgetting after the last task: mean over earlier tasks of the drop from
/// their best earlier accuracy.
pub fn forgetting_measure(m: &AccuracyMatrix) -> Result<f64> {
    forgetting_at(m, m.num_tasks().saturating_sub(1))
}

/// Forgetting measured after task `k`.
pub fn forgetting_at(m: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k == 0 || k >= m.num_tasks() {
        return Err(MetricsError::SingleTask);
    }
    let drops: f64 = (0..k)
        .map(|j| {
            let best = (j..k).map(|i| m.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
            best - m.rows[k][j]
        })
        .sum();
    Ok(drops / k as f64)
}

/// Mean over incremental tasks of `reference[k] − a[k][k]`, where
/// `reference[k]` is the accuracy of an unregularized model on task `k`.
pub fn intransigence_measure(m: &AccuracyMatrix, reference: &[f64]) -> Result<f64> {
    let n = m.num_tasks();
    if reference.len() != n {
        return Err(MetricsError::MissingReference {
            got: reference.len(),
            expected: n,
        });
    }
    if n < 2 {
        return Err(MetricsError::SingleTask);
    }
    Ok((1..n).map(|k| reference[k] - m.rows[k][k]).sum::<f64>() / (n - 1) as f64)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn centered(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    out
}

/// `XXᵀ` of an (n, p) row-major matrix.
fn gram(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x[i * p..(i + 1) * p]
                .iter()
                .zip(&x[j * p..(j + 1) * p])
                .map(|(a, b)| a * b)
                .sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// `AᵀB` of (n, p) and (n, q) row-major matrices.
fn cross(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        for (r, &av) in a[i * p..(i + 1) * p].iter().enumerate() {
            for (o, &bv) in out[r * q..(r + 1) * q].iter_mut().zip(&b[i * q..(i + 1) * q]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn frob2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear CKA of two (n, ·) feature matrices, computed in whichever of the
/// feature-space or sample-space forms is smaller.
pub fn linear_cka<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    let dims = |t: &Tensor<S>| match *t.shape() {
        [n, p] => (n, p),
        [n, ..] => (n, t.numel() / n.max(1)),
        [] => (0, 0),
    };
    let ((n, p), (ny, q)) = (dims(x), dims(y));
    if n != ny || n < 2 {
        return Err(MetricsError::CkaShape(n, ny));
    }
    let xc = centered(&x.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), n, p);
    let yc = centered(&y.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), n, q);
    let (num, dx, dy) = if n * n <= p * q {
        let (kx, ky) = (gram(&xc, n, p), gram(&yc, n, q));
        let num: f64 = kx.iter().zip(&ky).map(|(a, b)| a * b).sum();
        (num, frob2(&kx).sqrt(), frob2(&ky).sqrt())
    } else {
        let num = frob2(&cross(&yc, &xc, n, q, p));
        (
            num,
            frob2(&cross(&xc, &xc, n, p, p)).sqrt(),
            frob2(&cross(&yc, &yc, n, q, q)).sqrt(),
        )
    };
    if dx == 0.0 || dy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(num / (dx * dy))
}

/// `heatmap[i][j] = CKA(tap i of model_a, tap j of model_b)` on `probe`.
pub fn cka_heatmap<S: Scalar>(model_a: &Model<S>, model_b: &Model<S>, probe: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    let (ia, ib) = (model_a.infer(probe)?, model_b.infer(probe)?);
    ia.taps
        .iter()
        .map(|ta| ib.taps.iter().map(|tb| linear_cka(ta, tb)).collect())
        .collect()
}

/// Per-channel mean over the probe of `‖norm(z_after) − norm(z_before)‖`
/// at one tap, sorted ascending.
pub fn channel_shift_histogram<S: Scalar>(
    before: &Model<S>,
    after: &Model<S>,
    probe: &Tensor<S>,
    layer: usize,
) -> Result<Vec<f64>> {
    let (ib, ia) = (before.infer(probe)?, after.infer(probe)?);
    let layers = ib.taps.len();
    let (tb, ta) = match (ib.taps.get(layer), ia.taps.get(layer)) {
        (Some(b), Some(a)) => (normalize_tap(b)?, normalize_tap(a)?),
        _ => return Err(MetricsError::Layer { layer, layers }),
    };
    let (n, c, s) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
    let mut shift = vec![0.0; c];
    for b in 0..n {
        for (ch, out) in shift.iter_mut().enumerate() {
            let at = (b * c + ch) * s;
            let d2: f64 = (at..at + s)
                .map(|i| {
                    let d = ta.data()[i].as_f64() - tb.data()[i].as_f64();
                    d * d
                })
                .sum();
            *out += d2.sqrt() / n as f64;
        }
    }
    shift.sort_by(f64::total_cmp);
    Ok(shift)
}

/// Median of an ascending list (mean of the middle pair for even lengths).
pub fn median_sorted(values: &[f64]) -> f64 {
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// Max over median of a shift histogram; larger means a few channels
/// moved much more than the rest.
pub fn tail_ratio(sorted: &[f64]) -> f64 {
    let med = median_sorted(sorted);
    let max = sorted.last().copied().unwrap_or(f64::NAN);
    if med > 0.0 {
        max / med
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}
