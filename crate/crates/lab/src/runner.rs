//! Executes resolved runs into run directories.
//!
//! Layout of one run directory:
//!
//! ```text
//! config.toml          resolved spec (single seed, no grid)
//! provenance.json      seed, labels, code version, config hash
//! progress.json        completed tasks and accuracy rows so far
//! steps.jsonl          one trainer step record per line
//! checkpoints/task-T.ckpt
//! exemplars/task-T.json
//! reference.json       new-task accuracies of the undistilled reference
//! metrics.json         final report, recomputable from the files above
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sril_core::data::{self, BlobsConfig, Dataset, RingsConfig};
use sril_core::model::{read_checkpoint, write_checkpoint, Architecture, Model, ModelPair};
use sril_core::protocol::{build_scenario, evaluate, ExemplarStore, Head, Scenario};
use sril_core::rng::{SeedTree, Stream};
use sril_core::trainer::{
    train_pair, train_task, BatchPlan, DistillMode, NoObserver, StepRecord, TaskState, TrainError,
};
use sril_core::Tensor;

use crate::metrics::{compute_metrics, RunMetrics};
use crate::spec::{DatasetSpec, ExperimentSpec, ResolvedRun};

pub type Model64 = Model<f64>;
pub type Dataset64 = Dataset<f64>;

pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const REFERENCE_FILE: &str = "reference.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REFERENCE_DIR: &str = "_reference";

/// How existing run directories are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Existing {
    /// Refuse to touch a directory that already holds a run.
    #[default]
    Refuse,
    /// Delete and start over.
    Overwrite,
    /// Continue after the last completed task.
    Resume,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub existing: Existing,
    /// Run jobs one at a time.
    pub deterministic: bool,
    /// Stop after this task completes, leaving the run resumable.
    pub stop_after: Option<usize>,
    /// Suppress progress lines on stderr.
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub variant: String,
    pub scenario_label: String,
    pub seed: u64,
    pub version: String,
    pub config_sha256: String,
}

/// Completed tasks and the accuracy rows they produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub completed_tasks: usize,
    pub cnn_rows: Vec<Vec<f64>>,
    pub nme_rows: Vec<Vec<f64>>,
    /// Test samples per task, used to weight seen-class accuracy.
    pub task_test_counts: Vec<usize>,
}

/// New-task accuracies `a*_k` of the reference run, per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub source: String,
    pub cnn: Vec<f64>,
    pub nme: Vec<f64>,
}

/// Everything a run needs that is derived from its spec.
pub struct Prepared {
    pub train: Dataset64,
    pub test: Dataset64,
    pub scenario: Scenario,
    pub arch: Architecture,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads or generates the data, builds the scenario and maps labels into
/// incremental order.
pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    let seed = spec.method.seed;
    let (train, test): (Dataset64, Dataset64) = match &spec.dataset {
        &DatasetSpec::Blobs {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
            center_scale,
        } => data::blobs(
            &BlobsConfig {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
                center_scale,
            },
            seed,
        )?,
        &DatasetSpec::Rings {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => data::rings(
            &RingsConfig {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            },
            seed,
        )?,
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        ),
        DatasetSpec::Csv {
            train,
            test,
            label_column,
        } => (
            data::load_csv(train, label_column)?,
            data::load_csv(test, label_column)?,
        ),
    };
    if train.sample_shape() != test.sample_shape() {
        bail!(
            "train samples have shape {:?} but test samples {:?}",
            train.sample_shape(),
            test.sample_shape()
        );
    }
    let num_classes = train.num_classes.max(test.num_classes);
    if let Some(n) = spec.scenario.num_classes {
        if n != num_classes {
            bail!("scenario.num_classes = {n} but the dataset has {num_classes} classes");
        }
    }
    let scenario = build_scenario(
        num_classes,
        spec.scenario.initial_task_size,
        spec.scenario.increment,
        seed,
    )?;
    let shape = train.sample_shape().to_vec();
    let id = if shape.len() == 1 { "mlp-s" } else { "conv-s" };
    let arch = Architecture::from_input_shape(id, &shape)
        .ok_or_else(|| anyhow!("samples of shape {shape:?} fit neither a vector nor an image network"))?;
    let map = scenario.label_map();
    Ok(Prepared {
        train: train.relabel(&map),
        test: test.relabel(&map),
        scenario,
        arch,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task-{task}.ckpt"))
}

pub fn exemplar_path(dir: &Path, task: usize) -> PathBuf {
    dir.join("exemplars").join(format!("task-{task}.json"))
}

pub fn save_model(model: &Model64, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model64> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    read_checkpoint(&mut r).with_context(|| format!("cannot load {}", path.display()))
}

pub fn read_config(dir: &Path) -> Result<ExperimentSpec> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    ExperimentSpec::parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Step records of tasks before `tasks`.
pub fn read_steps(dir: &Path, tasks: usize) -> Result<Vec<StepRecord>> {
    let path = dir.join(STEPS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StepRecord>(&line) {
            Ok(r) if r.task < tasks => out.push(r),
            Ok(_) => {}
            // A torn final line from an interrupted write.
            Err(_) if out.iter().all(|r| r.task < tasks) => break,
            Err(e) => return Err(e).with_context(|| format!("{}:{}", path.display(), i + 1)),
        }
    }
    Ok(out)
}

fn write_steps(dir: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    write_atomic(&dir.join(STEPS_FILE), &buf)
}

fn append_steps(dir: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(STEPS_FILE))?;
    let mut buf = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.sync_data()?;
    Ok(())
}

fn explain(err: TrainError, task: usize) -> anyhow::Error {
    match err {
        TrainError::NonFiniteLoss(rec) => anyhow!(
            "non-finite loss at task {task}, step {} (cls {}, distill {}); lower method.lr0 or method.lambda_gfd",
            rec.step,
            rec.cls_loss,
            rec.gfd_loss
        ),
        other => anyhow::Error::new(other).context(format!("training task {task} failed")),
    }
}

/// Whether the spec trains without any regularizer, so it is its own
/// intransigence reference.
pub fn is_unregularized(spec: &ExperimentSpec) -> bool {
    spec.method.distill_mode == DistillMode::None && !spec.method.cwi_enabled
}

/// The undistilled, interpolation-free counterpart of a run. Settings that
/// only affect the regularizers are reset so equivalent references share
/// one directory.
pub fn reference_spec(spec: &ExperimentSpec) -> ExperimentSpec {
    let defaults = sril_core::trainer::SrilConfig::default();
    let mut r = spec.clone();
    r.name = REFERENCE_DIR.into();
    r.method.distill_mode = DistillMode::None;
    r.method.cwi_enabled = false;
    r.method.alpha = defaults.alpha;
    r.method.lambda_th = defaults.lambda_th;
    r.method.lambda_gfd = defaults.lambda_gfd;
    r.outputs.intransigence = false;
    r.outputs.formats = defaults_formats();
    r
}

fn defaults_formats() -> Vec<crate::spec::ReportFormat> {
    crate::spec::OutputSpec::default().formats
}

pub fn reference_run(run: &ResolvedRun) -> Result<ResolvedRun> {
    let spec = reference_spec(&run.spec);
    let hash = sha256_hex(spec.to_toml()?.as_bytes());
    Ok(ResolvedRun {
        spec,
        variant: hash[..16].to_string(),
        scenario_label: "reference".into(),
        seed: run.seed,
    })
}

/// Outcome of [`execute`].
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed(Box<RunMetrics>),
    /// Stopped early on request after the given number of tasks.
    Stopped(usize),
}

/// Runs one resolved spec into `dir`, honoring `opts.existing`.
pub fn execute(run: &ResolvedRun, dir: &Path, reference: Option<&Path>, opts: &RunOptions) -> Result<Outcome> {
    let config = run.spec.to_toml()?;
    let config_sha256 = sha256_hex(config.as_bytes());
    let mut progress = Progress::default();
    let occupied = dir.join(CONFIG_FILE).exists() || dir.join(PROGRESS_FILE).exists();
    if occupied {
        match opts.existing {
            Existing::Refuse => bail!(
                "{} already holds a run; pass --overwrite to replace it or --resume to continue it",
                dir.display()
            ),
            Existing::Overwrite => {
                fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
            }
            Existing::Resume => {
                let existing = read_config(dir)?;
                if existing != run.spec {
                    bail!(
                        "{} was started from a different configuration; use --overwrite to start over",
                        dir.display()
                    );
                }
                if dir.join(PROGRESS_FILE).exists() {
                    progress = read_json(&dir.join(PROGRESS_FILE))?;
                }
            }
        }
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("exemplars"))?;
    write_atomic(&dir.join(CONFIG_FILE), config.as_bytes())?;
    write_json(
        &dir.join(PROVENANCE_FILE),
        &Provenance {
            name: run.spec.name.clone(),
            variant: run.variant.clone(),
            scenario_label: run.scenario_label.clone(),
            seed: run.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256,
        },
    )?;

    let prep = prepare(&run.spec)?;
    let (spec, cfg) = (&run.spec, &run.spec.method);
    let scenario = &prep.scenario;
    let tree = SeedTree::new(cfg.seed);
    let m = spec.scenario.memory_per_class;
    if progress.completed_tasks > scenario.num_tasks() {
        bail!("{} records more tasks than the scenario has", dir.display());
    }
    write_steps(dir, &read_steps(dir, progress.completed_tasks)?)?;
    if progress.task_test_counts.is_empty() {
        progress.task_test_counts = (0..scenario.num_tasks())
            .map(|t| {
                let r = scenario.task_range(t);
                prep.test.indices_where(|y| r.contains(&y)).len()
            })
            .collect();
    }

    let (mut model, mut store) = match progress.completed_tasks {
        0 => (None, ExemplarStore::new(prep.train.id.clone(), m)),
        c => (
            Some(load_model(&checkpoint_path(dir, c - 1))?),
            ExemplarStore::load(&exemplar_path(dir, c - 1))?,
        ),
    };

    for t in progress.completed_tasks..scenario.num_tasks() {
        let range = scenario.task_range(t);
        let mut idx = prep.train.indices_where(|y| range.contains(&y));
        idx.extend(store.indices());
        let data = prep.train.subset(&idx);
        let state = TaskState::new(t, scenario.n_task(t), scenario.n_seen(t), cfg)?;
        let (trained, report) = match model.take() {
            None => {
                let mut fresh = Model64::new(
                    prep.arch,
                    scenario.n_task(t),
                    cfg.k,
                    cfg.margin,
                    &mut tree.rng(Stream::Init, 0),
                )?;
                fresh.head.eta = Tensor::from_vec(vec![cfg.eta_init]);
                let report = train_task(
                    &mut fresh,
                    None,
                    &data,
                    cfg,
                    &state,
                    BatchPlan::Shuffle,
                    &mut NoObserver,
                )
                .map_err(|e| explain(e, t))?;
                (fresh, report)
            }
            Some(prev) => {
                let mut rng = tree.rng(Stream::HeadExpansion, t as u32);
                let mut pair = ModelPair::for_next_task(&prev, scenario.n_task(t), &mut rng)?;
                let report = train_pair(&mut pair, &data, cfg, &state, BatchPlan::Shuffle, &mut NoObserver)
                    .map_err(|e| explain(e, t))?;
                (pair.into_parts().1, report)
            }
        };
        store.update(&trained, &prep.train, range, m)?;
        let cnn = evaluate(&trained, scenario, t, Head::Cnn, None, &prep.test)?;
        let nme = evaluate(
            &trained,
            scenario,
            t,
            Head::Nme,
            Some((&store, &prep.train)),
            &prep.test,
        )?;

        save_model(&trained, &checkpoint_path(dir, t))?;
        store.save(&exemplar_path(dir, t))?;
        append_steps(dir, &report.steps)?;
        progress.completed_tasks = t + 1;
        progress.cnn_rows.push(cnn.per_task);
        progress.nme_rows.push(nme.per_task);
        write_json(&dir.join(PROGRESS_FILE), &progress)?;
        if !opts.quiet {
            eprintln!(
                "{}: task {}/{} cnn {:.2}% nme {:.2}%",
                run,
                t + 1,
                scenario.num_tasks(),
                100.0 * cnn.overall,
                100.0 * nme.overall
            );
        }
        model = Some(trained);
        if opts.stop_after == Some(t) && t + 1 < scenario.num_tasks() {
            return Ok(Outcome::Stopped(t + 1));
        }
    }

    let reference = match reference {
        Some(ref_dir) => {
            let p: Progress = read_json(&ref_dir.join(PROGRESS_FILE))?;
            Some(reference_from(&p, ref_dir.display().to_string()))
        }
        None if is_unregularized(spec) => Some(reference_from(&progress, "self".into())),
        None => None,
    };
    match &reference {
        Some(r) => write_json(&dir.join(REFERENCE_FILE), r)?,
        None => {
            let _ = fs::remove_file(dir.join(REFERENCE_FILE));
        }
    }
    let metrics = compute_metrics(dir)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(Outcome::Completed(Box::new(metrics)))
}

fn reference_from(p: &Progress, source: String) -> Reference {
    let diag = |rows: &[Vec<f64>]| rows.iter().enumerate().map(|(k, r)| r[k]).collect();
    Reference {
        source,
        cnn: diag(&p.cnn_rows),
        nme: diag(&p.nme_rows),
    }
}

/// Whether `dir` holds a finished run of exactly `spec`.
fn is_complete(dir: &Path, spec: &ExperimentSpec) -> bool {
    dir.join(METRICS_FILE).exists() && read_config(dir).is_ok_and(|c| &c == spec)
}

/// Summary of one executed spec.
#[derive(Debug, Clone)]
pub struct RunSet {
    pub root: PathBuf,
    pub dirs: Vec<PathBuf>,
    pub metrics: Vec<RunMetrics>,
    pub stopped: Vec<PathBuf>,
}

fn for_each<T: Send, R: Send>(
    items: Vec<T>,
    sequential: bool,
    f: impl Fn(T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if sequential {
        items.into_iter().map(f).collect()
    } else {
        items.into_par_iter().map(f).collect()
    }
}

/// Expands `spec` and executes every run, training shared intransigence
/// references first.
pub fn run_spec(spec: &ExperimentSpec, seed: Option<u64>, root: &Path, opts: &RunOptions) -> Result<RunSet> {
    let runs = spec.expand(seed)?;
    let mut refs: Vec<ResolvedRun> = Vec::new();
    let mut ref_of = Vec::new();
    for run in &runs {
        if run.spec.outputs.intransigence && !is_unregularized(&run.spec) {
            let r = reference_run(run)?;
            let dir = root.join(r.relative_dir());
            if !refs.iter().any(|x| x == &r) {
                refs.push(r);
            }
            ref_of.push(Some(dir));
        } else {
            ref_of.push(None);
        }
    }

    let ref_opts = RunOptions {
        existing: Existing::Resume,
        stop_after: None,
        ..opts.clone()
    };
    for_each(refs, opts.deterministic, |r| {
        let dir = root.join(r.relative_dir());
        if is_complete(&dir, &r.spec) {
            return Ok(());
        }
        execute(&r, &dir, None, &ref_opts).map(|_| ())
    })?;

    let jobs: Vec<_> = runs.into_iter().zip(ref_of).collect();
    let outcomes = for_each(jobs, opts.deterministic, |(run, reference)| {
        let dir = root.join(run.relative_dir());
        let out = execute(&run, &dir, reference.as_deref(), opts).with_context(|| format!("run {run} failed"))?;
        Ok((dir, out))
    })?;

    let mut set = RunSet {
        root: root.to_path_buf(),
        dirs: Vec::new(),
        metrics: Vec::new(),
        stopped: Vec::new(),
    };
    for (dir, out) in outcomes {
        match out {
            Outcome::Completed(m) => {
                set.metrics.push(*m);
                set.dirs.push(dir);
            }
            Outcome::Stopped(_) => set.stopped.push(dir),
        }
    }
    Ok(set)
}
