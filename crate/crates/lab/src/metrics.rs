//! The per-run metrics report, computed only from files in a run directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sril_core::metrics::{
    average_accuracy, channel_shift_histogram, cka_heatmap, forgetting_at, forgetting_measure, intransigence_measure,
    linear_cka, mean_std, tail_ratio, AccuracyMatrix,
};
use sril_core::trainer::StepRecord;
use sril_core::Tensor;

use crate::runner::{
    checkpoint_path, load_model, prepare, read_config, read_json, read_steps, sha256_hex, Prepared, Progress,
    Provenance, Reference, CONFIG_FILE, PROGRESS_FILE, PROVENANCE_FILE, REFERENCE_FILE,
};

/// Fraction of steps at each end of a task used for gate statistics.
pub const GATE_WINDOW: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioShape {
    pub num_classes: usize,
    pub initial_task_size: usize,
    pub increment: usize,
    pub num_tasks: usize,
    pub memory_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    /// `matrix[k][j]`: accuracy on task `j` after training task `k`.
    pub matrix: Vec<Vec<f64>>,
    /// Accuracy over all classes seen after each task.
    pub seen_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    /// Forgetting after the final task; absent for single-task runs.
    pub forgetting: Option<f64>,
    /// Forgetting after each task `k ≥ 1`.
    pub forgetting_trajectory: Vec<f64>,
    pub intransigence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMetrics {
    /// `heatmap[i][j]`: CKA between tap `i` after task 0 and tap `j` of the final model.
    pub heatmap: Vec<Vec<Option<f64>>>,
    pub last_tap: Option<f64>,
    pub diagonal_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub layer: usize,
    /// Per-channel shift between the task-0 and final models, ascending.
    pub values: Vec<f64>,
    /// Max over median; absent when the median is zero.
    pub tail_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: usize,
    pub steps: usize,
    pub gate_fired: usize,
    pub cwi_applied: usize,
    /// Gate-fired fraction over the first and last windows of the task.
    pub gate_first: f64,
    pub gate_last: f64,
    /// Mean per-layer mask activation rate over steps that had a mask.
    pub mask_rate: Option<Vec<f64>>,
    pub final_cls_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub variant: String,
    pub scenario_label: String,
    pub seed: u64,
    pub config_sha256: String,
    pub scenario: ScenarioShape,
    pub class_order: Vec<usize>,
    pub cnn: HeadMetrics,
    pub nme: HeadMetrics,
    pub probe_size: usize,
    pub cka: CkaMetrics,
    pub channel_shift: Vec<ShiftMetrics>,
    pub mean_tail_ratio: Option<f64>,
    pub tasks: Vec<TaskStats>,
}

fn head_metrics(rows: &[Vec<f64>], weights: &[usize], reference: Option<&[f64]>) -> Result<HeadMetrics> {
    let m = AccuracyMatrix::from_rows(rows.to_vec(), weights.iter().map(|&w| w as f64).collect())?;
    let n = m.num_tasks();
    let forgetting = if n >= 2 { Some(forgetting_measure(&m)?) } else { None };
    let forgetting_trajectory = (1..n).map(|k| forgetting_at(&m, k)).collect::<Result<_, _>>()?;
    let intransigence = match reference {
        Some(r) if n >= 2 => Some(intransigence_measure(&m, r)?),
        _ => None,
    };
    Ok(HeadMetrics {
        seen_accuracy: (0..n).map(|k| m.seen_accuracy(k)).collect(),
        average_accuracy: average_accuracy(&m)?,
        forgetting,
        forgetting_trajectory,
        intransigence,
        matrix: m.rows,
    })
}

fn fraction(steps: &[&StepRecord]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    steps.iter().filter(|s| s.gate_fired).count() as f64 / steps.len() as f64
}

/// Gate and mask statistics of one task's steps.
pub fn task_stats(task: usize, steps: &[&StepRecord]) -> TaskStats {
    let n = steps.len();
    let w = ((n as f64 * GATE_WINDOW).floor() as usize).max(1).min(n);
    let masks: Vec<&Vec<f64>> = steps.iter().filter_map(|s| s.mask_rate.as_ref()).collect();
    let mask_rate = masks.first().map(|first| {
        (0..first.len())
            .map(|l| masks.iter().map(|m| m[l]).sum::<f64>() / masks.len() as f64)
            .collect()
    });
    TaskStats {
        task,
        steps: n,
        gate_fired: steps.iter().filter(|s| s.gate_fired).count(),
        cwi_applied: steps.iter().filter(|s| s.cwi_applied).count(),
        gate_first: fraction(&steps[..w]),
        gate_last: fraction(&steps[n - w..]),
        mask_rate,
        final_cls_loss: steps.last().map(|s| s.cls_loss),
    }
}

/// Evenly spaced test samples of the initial classes.
pub fn probe(prep: &Prepared, size: usize) -> Tensor<f64> {
    let range = prep.scenario.task_range(0);
    let idx = prep.test.indices_where(|y| range.contains(&y));
    let take = size.min(idx.len());
    let picked: Vec<usize> = (0..take).map(|i| idx[i * idx.len() / take]).collect();
    prep.test.inputs.select_rows(&picked)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Recomputes the metrics report of a run directory from its persisted
/// config, progress, step log, checkpoints and reference.
pub fn compute_metrics(dir: &Path) -> Result<RunMetrics> {
    let spec = read_config(dir)?;
    let config = std::fs::read(dir.join(CONFIG_FILE))?;
    let prov: Provenance = read_json(&dir.join(PROVENANCE_FILE))?;
    let progress: Progress = read_json(&dir.join(PROGRESS_FILE))?;
    let prep = prepare(&spec)?;
    let sc = &prep.scenario;
    if progress.completed_tasks != sc.num_tasks() {
        bail!(
            "{} finished {} of {} tasks; resume it first",
            dir.display(),
            progress.completed_tasks,
            sc.num_tasks()
        );
    }
    let reference: Option<Reference> = match dir.join(REFERENCE_FILE) {
        p if p.exists() => Some(read_json(&p)?),
        _ => None,
    };
    let cnn = head_metrics(
        &progress.cnn_rows,
        &progress.task_test_counts,
        reference.as_ref().map(|r| r.cnn.as_slice()),
    )
    .context("cnn head")?;
    let nme = head_metrics(
        &progress.nme_rows,
        &progress.task_test_counts,
        reference.as_ref().map(|r| r.nme.as_slice()),
    )
    .context("nme head")?;

    let first = load_model(&checkpoint_path(dir, 0))?;
    let last = load_model(&checkpoint_path(dir, sc.num_tasks() - 1))?;
    let x = probe(&prep, spec.outputs.probe_size);
    let heatmap = cka_heatmap_cells(&first, &last, &x)?;
    let diag: Vec<Option<f64>> = (0..heatmap.len()).map(|i| heatmap[i][i]).collect();
    let diagonal_mean = diag
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|d| mean_std(&d).0);
    let layers = first.arch().num_stages();
    let channel_shift = (0..layers)
        .map(|layer| {
            let values = channel_shift_histogram(&first, &last, &x, layer)?;
            Ok(ShiftMetrics {
                layer,
                tail_ratio: finite(tail_ratio(&values)),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_tail_ratio = channel_shift
        .iter()
        .map(|s| s.tail_ratio)
        .collect::<Option<Vec<f64>>>()
        .map(|r| mean_std(&r).0);

    let steps = read_steps(dir, sc.num_tasks())?;
    let tasks = (0..sc.num_tasks())
        .map(|t| {
            let own: Vec<&StepRecord> = steps.iter().filter(|s| s.task == t).collect();
            task_stats(t, &own)
        })
        .collect();

    Ok(RunMetrics {
        name: prov.name,
        variant: prov.variant,
        scenario_label: prov.scenario_label,
        seed: spec.method.seed,
        config_sha256: sha256_hex(&config),
        scenario: ScenarioShape {
            num_classes: sc.num_classes(),
            initial_task_size: sc.initial_task_size,
            increment: sc.increment,
            num_tasks: sc.num_tasks(),
            memory_per_class: spec.scenario.memory_per_class,
        },
        class_order: sc.class_order.clone(),
        cnn,
        nme,
        probe_size: x.shape()[0],
        cka: CkaMetrics {
            last_tap: diag.last().copied().flatten(),
            heatmap,
            diagonal_mean,
        },
        channel_shift,
        mean_tail_ratio,
        tasks,
    })
}

/// CKA heatmap with undefined cells (zero-variance taps) left empty.
fn cka_heatmap_cells(
    a: &sril_core::Model<f64>,
    b: &sril_core::Model<f64>,
    probe: &Tensor<f64>,
) -> Result<Vec<Vec<Option<f64>>>> {
    match cka_heatmap(a, b, probe) {
        Ok(h) => Ok(h.into_iter().map(|r| r.into_iter().map(finite).collect()).collect()),
        Err(_) => {
            let (ia, ib) = (a.infer(probe)?, b.infer(probe)?);
            Ok(ia
                .taps
                .iter()
                .map(|ta| {
                    ib.taps
                        .iter()
                        .map(|tb| linear_cka(ta, tb).ok().and_then(finite))
                        .collect()
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(gate: bool, mask: Option<Vec<f64>>) -> StepRecord {
        StepRecord {
            task: 1,
            step: 0,
            epoch: 0,
            lr: 0.1,
            cls_loss: 1.0,
            gfd_loss: 0.0,
            total_loss: 1.0,
            conf_old_model: None,
            conf_new_model: None,
            delta: 0.0,
            gate_fired: gate,
            cwi_applied: gate,
            mask_rate: mask,
            n_old: 1,
            n_new: 1,
        }
    }

    #[test]
    fn gate_windows_cover_a_fifth_of_the_task() {
        let steps: Vec<StepRecord> = (0..10).map(|i| step(i < 3 || i == 9, None)).collect();
        let refs: Vec<&StepRecord> = steps.iter().collect();
        let s = task_stats(1, &refs);
        assert_eq!((s.steps, s.gate_fired, s.cwi_applied), (10, 4, 4));
        assert_eq!(s.gate_first, 1.0);
        assert_eq!(s.gate_last, 0.5);
        assert_eq!(s.mask_rate, None);
    }

    #[test]
    fn short_tasks_use_one_step_windows() {
        let steps = [step(true, Some(vec![0.5, 1.0])), step(false, Some(vec![0.0, 0.5]))];
        let refs: Vec<&StepRecord> = steps.iter().collect();
        let s = task_stats(1, &refs);
        assert_eq!((s.gate_first, s.gate_last), (1.0, 0.0));
        assert_eq!(s.mask_rate, Some(vec![0.25, 0.75]));
    }

    #[test]
    fn head_metrics_match_hand_values() {
        let rows = vec![vec![0.9], vec![0.7, 0.8]];
        let h = head_metrics(&rows, &[1, 1], Some(&[0.95, 0.9])).unwrap();
        assert!((h.seen_accuracy[1] - 0.75).abs() < 1e-15);
        assert!((h.average_accuracy - 0.825).abs() < 1e-15);
        assert!((h.forgetting.unwrap() - 0.2).abs() < 1e-15);
        assert!((h.intransigence.unwrap() - 0.1).abs() < 1e-15);
        let single = head_metrics(&[vec![0.8]], &[1], None).unwrap();
        assert_eq!((single.forgetting, single.intransigence), (None, None));
        assert!(single.forgetting_trajectory.is_empty());
    }
}
