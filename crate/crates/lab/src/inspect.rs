//! Plot-ready CSV series extracted from a run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use sril_core::protocol::embed;

use crate::metrics::RunMetrics;
use crate::runner::{
    checkpoint_path, load_model, prepare, read_config, read_json, read_steps, Progress, METRICS_FILE, PROGRESS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum What {
    Confidence,
    Mask,
    Cka,
    Shift,
    Accuracy,
    Embeddings,
}

impl What {
    pub const ALL: [What; 6] = [
        What::Confidence,
        What::Mask,
        What::Cka,
        What::Shift,
        What::Accuracy,
        What::Embeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            What::Confidence => "confidence",
            What::Mask => "mask",
            What::Cka => "cka",
            What::Shift => "shift",
            What::Accuracy => "accuracy",
            What::Embeddings => "embeddings",
        }
    }
}

impl FromStr for What {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        What::ALL.into_iter().find(|w| w.name() == s).ok_or_else(|| {
            format!("unknown analysis {s:?}; expected one of confidence, mask, cka, shift, accuracy, embeddings")
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        bail!("{} has no {METRICS_FILE}; the run has not finished", dir.display());
    }
    read_json(&path)
}

/// Writes `inspect/<what>.csv` under `dir` and returns its path.
pub fn inspect(dir: &Path, what: What) -> Result<PathBuf> {
    if !dir.join(PROGRESS_FILE).exists() {
        bail!("{} is not a run directory (no {PROGRESS_FILE})", dir.display());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    match what {
        What::Confidence => {
            let progress: Progress = read_json(&dir.join(PROGRESS_FILE))?;
            let steps = read_steps(dir, progress.completed_tasks)?;
            if steps.is_empty() {
                bail!("{} has no step log", dir.display());
            }
            w.write_record([
                "task",
                "step",
                "conf_old_model",
                "conf_new_model",
                "gap",
                "delta",
                "gate_fired",
                "cwi_applied",
            ])?;
            for s in steps.iter().filter(|s| s.task > 0) {
                w.write_record([
                    s.task.to_string(),
                    s.step.to_string(),
                    opt(s.conf_old_model),
                    opt(s.conf_new_model),
                    opt(s.confidence_gap()),
                    s.delta.to_string(),
                    u8::from(s.gate_fired).to_string(),
                    u8::from(s.cwi_applied).to_string(),
                ])?;
            }
        }
        What::Mask => {
            let progress: Progress = read_json(&dir.join(PROGRESS_FILE))?;
            let steps = read_steps(dir, progress.completed_tasks)?;
            let layers = steps.iter().find_map(|s| s.mask_rate.as_ref().map(Vec::len));
            let Some(layers) = layers else {
                bail!(
                    "{} logged no distillation masks (was distillation enabled?)",
                    dir.display()
                );
            };
            let mut header = vec!["task".to_string(), "step".to_string()];
            header.extend((0..layers).map(|l| format!("layer{l}")));
            w.write_record(&header)?;
            for s in &steps {
                if let Some(m) = &s.mask_rate {
                    let mut rec = vec![s.task.to_string(), s.step.to_string()];
                    rec.extend(m.iter().map(f64::to_string));
                    w.write_record(&rec)?;
                }
            }
        }
        What::Cka => {
            let m = metrics(dir)?;
            let n = m.cka.heatmap.first().map_or(0, Vec::len);
            let mut header = vec!["task0_tap".to_string()];
            header.extend((0..n).map(|j| format!("final_tap{j}")));
            w.write_record(&header)?;
            for (i, row) in m.cka.heatmap.iter().enumerate() {
                let mut rec = vec![i.to_string()];
                rec.extend(row.iter().map(|v| opt(*v)));
                w.write_record(&rec)?;
            }
        }
        What::Shift => {
            let m = metrics(dir)?;
            w.write_record(["layer", "rank", "shift"])?;
            for s in &m.channel_shift {
                for (rank, v) in s.values.iter().enumerate() {
                    w.write_record([s.layer.to_string(), rank.to_string(), v.to_string()])?;
                }
            }
        }
        What::Accuracy => {
            let m = metrics(dir)?;
            w.write_record(["head", "after_task", "task", "accuracy"])?;
            for (head, hm) in [("cnn", &m.cnn), ("nme", &m.nme)] {
                for (k, row) in hm.matrix.iter().enumerate() {
                    for (j, a) in row.iter().enumerate() {
                        w.write_record([head.to_string(), k.to_string(), j.to_string(), a.to_string()])?;
                    }
                }
            }
        }
        What::Embeddings => {
            let spec = read_config(dir)?;
            let progress: Progress = read_json(&dir.join(PROGRESS_FILE))?;
            if progress.completed_tasks == 0 {
                bail!("{} has no checkpoint yet", dir.display());
            }
            let model = load_model(&checkpoint_path(dir, progress.completed_tasks - 1))?;
            let prep = prepare(&spec)?;
            let seen = prep.scenario.n_seen(progress.completed_tasks - 1);
            let idx = prep.test.indices_where(|y| y < seen);
            let (emb, _) = embed(&model, &prep.test.inputs.select_rows(&idx))?;
            let d = emb.shape()[1];
            let mut header = vec!["label".to_string(), "task".to_string()];
            header.extend((0..d).map(|j| format!("e{j}")));
            w.write_record(&header)?;
            for (r, &i) in idx.iter().enumerate() {
                let y = prep.test.labels[i];
                let mut rec = vec![y.to_string(), prep.scenario.task_of(y).to_string()];
                rec.extend(emb.data()[r * d..(r + 1) * d].iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
    }
    let out_dir = dir.join("inspect");
    fs::create_dir_all(&out_dir)?;
    let path = out_dir.join(format!("{}.csv", what.name()));
    fs::write(&path, w.into_inner()?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}
