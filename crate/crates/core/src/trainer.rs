//! Task-level training loop: per-batch confidence gate and weight
//! interpolation, distillation mask, combined loss and momentum SGD.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape};
use crate::data::Dataset;
use crate::model::{Model, ModelError, ModelPair};
use crate::objectives::{self, fd_channel_loss_on, gfd_mask, ChannelMask, ObjectiveError};
use crate::optim::{cosine_lr, sgd_step, OptimError, SgdParams};
use crate::rng::{SeedTree, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("confidence of an empty sample set")]
    EmptySet,
    #[error("parameters are not aligned: {0}")]
    Misaligned(String),
    #[error("non-finite loss at task {} step {} (cls={}, gfd={})", .0.task, .0.step, .0.cls_loss, .0.gfd_loss)]
    NonFiniteLoss(Box<StepRecord>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    None,
    Sfd,
    Gfd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrilConfig {
    pub alpha: f64,
    pub lambda_th: f64,
    pub lambda_gfd: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distill_mode: DistillMode,
    pub cwi_enabled: bool,
    pub k: usize,
    pub margin: f64,
    /// Initial value of the learnable logit scale.
    pub eta_init: f64,
    pub seed: u64,
}

impl Default for SrilConfig {
    fn default() -> Self {
        Self {
            alpha: 0.995,
            lambda_th: 0.1,
            lambda_gfd: 2.0,
            epochs: 160,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            distill_mode: DistillMode::Gfd,
            cwi_enabled: true,
            k: 10,
            margin: 0.6,
            eta_init: 1.0,
            seed: 0,
        }
    }
}

impl SrilConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lambda_th >= 0.0) || !(self.lambda_gfd >= 0.0) {
            return bad(format!(
                "lambda_th and lambda_gfd must be non-negative, got {} and {}",
                self.lambda_th, self.lambda_gfd
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 {
            return bad("epochs, batch_size and k must be positive".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !self.margin.is_finite() {
            return bad("momentum must lie in [0, 1), weight_decay ≥ 0 and margin finite".into());
        }
        if !(self.eta_init > 0.0) || !self.eta_init.is_finite() {
            return bad(format!("eta_init must be positive and finite, got {}", self.eta_init));
        }
        Ok(())
    }
}

/// `λ_th · n_task² / n_seen`.
pub fn delta_threshold(lambda_th: f64, n_task: usize, n_seen: usize) -> f64 {
    lambda_th * (n_task * n_task) as f64 / n_seen as f64
}

/// Interpolation coefficient: `α` when the old model is more confident than
/// the current one by at least `δ`, otherwise 1.
pub fn cwi_gate(conf_old: f64, conf_new: f64, delta: f64, alpha: f64) -> f64 {
    if conf_old - conf_new >= delta {
        alpha
    } else {
        1.0
    }
}

/// Per-task quantities derived from class counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task: usize,
    pub n_task: usize,
    pub n_seen: usize,
    pub delta: f64,
    pub lambda_gfd_t: f64,
}

impl TaskState {
    pub fn new(task: usize, n_task: usize, n_seen: usize, cfg: &SrilConfig) -> Result<Self> {
        let lambda_gfd_t = objectives::lambda_gfd_t(cfg.lambda_gfd, n_seen, n_task)?;
        Ok(Self {
            task,
            n_task,
            n_seen,
            delta: delta_threshold(cfg.lambda_th, n_task, n_seen),
            lambda_gfd_t,
        })
    }

    /// Number of classes learned before this task.
    pub fn n_old(&self) -> usize {
        self.n_seen - self.n_task
    }
}

/// Mean probability of the true label under `softmax(|η| · logits)`.
pub fn confidence_from_logits<S: Scalar>(logits: &Tensor<S>, eta_abs: S, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let n = logits.shape().get(1).copied().unwrap_or(0);
    if logits.shape() != [labels.len(), n] || labels.iter().any(|&y| y >= n) {
        return Err(TrainError::Misaligned(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let eta = eta_abs.as_f64();
    let total: f64 = logits
        .data()
        .chunks(n)
        .zip(labels)
        .map(|(row, &y)| {
            let scaled: Vec<f64> = row.iter().map(|v| eta * v.as_f64()).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
            (scaled[y] - max).exp() / denom
        })
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn confidence<S: Scalar>(model: &Model<S>, inputs: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let inf = model.infer(inputs)?;
    confidence_from_logits(&inf.logits, model.head.eta_abs(), labels)
}

/// `θ_new ← β·θ_new + (1−β)·θ_old` over the backbone, the proxies of the
/// classes `θ_old` knows, and `η`. Proxies of new classes are left alone.
pub fn cwi_apply<S: Scalar>(new: &mut Model<S>, old: &Model<S>, beta: f64) -> Result<()> {
    let (hn, ho) = (&new.head, &old.head);
    let aligned_backbone = new.arch() == old.arch()
        && new.backbone.stages.len() == old.backbone.stages.len()
        && new
            .backbone
            .stages
            .iter()
            .zip(&old.backbone.stages)
            .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape());
    if !aligned_backbone || hn.k() != ho.k() || hn.embed_dim() != ho.embed_dim() || ho.num_classes() > hn.num_classes()
    {
        return Err(TrainError::Misaligned(format!(
            "cannot interpolate {} ({} classes) towards {} ({} classes)",
            new.arch().id(),
            hn.num_classes(),
            old.arch().id(),
            ho.num_classes()
        )));
    }
    let (b, a) = (S::lit(beta), S::lit(1.0 - beta));
    let mix = |dst: &mut [S], src: &[S]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = b * *d + a * s;
        }
    };
    for (sn, so) in new.backbone.stages.iter_mut().zip(&old.backbone.stages) {
        mix(sn.weight.data_mut(), so.weight.data());
        mix(sn.bias.data_mut(), so.bias.data());
    }
    let shared = old.head.proxies.numel();
    mix(&mut new.head.proxies.data_mut()[..shared], old.head.proxies.data());
    mix(new.head.eta.data_mut(), old.head.eta.data());
    Ok(())
}

/// One mini-batch as drawn: the epoch it belongs to and dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub indices: Vec<usize>,
}

/// Where mini-batches come from.
#[derive(Debug, Clone, Copy)]
pub enum BatchPlan<'a> {
    /// Uniform shuffles each epoch from the task's seeded stream.
    Shuffle,
    /// Exactly the given batches, e.g. recorded by an earlier run.
    Replay(&'a [BatchRecord]),
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    pub gfd_loss: f64,
    pub total_loss: f64,
    pub conf_old_model: Option<f64>,
    pub conf_new_model: Option<f64>,
    pub delta: f64,
    pub gate_fired: bool,
    pub cwi_applied: bool,
    pub mask_rate: Option<Vec<f64>>,
    pub n_old: usize,
    pub n_new: usize,
}

impl StepRecord {
    /// `conf_old − conf_new`, when the gate was evaluated.
    pub fn confidence_gap(&self) -> Option<f64> {
        Some(self.conf_old_model? - self.conf_new_model?)
    }
}

/// Hooks into the training loop.
pub trait TrainObserver<S> {
    /// Called right after an interpolation, with the pre-update weights.
    fn after_cwi(&mut self, _before: &Model<S>, _after: &Model<S>, _old: &Model<S>, _beta: f64) {}
    fn on_step(&mut self, _record: &StepRecord, _mask: Option<&ChannelMask>) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<S> TrainObserver<S> for NoObserver {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub steps: Vec<StepRecord>,
    pub batches: Vec<BatchRecord>,
}

impl TaskReport {
    pub fn gate_events(&self) -> usize {
        self.steps.iter().filter(|s| s.cwi_applied).count()
    }
}

fn draw_batches(n: usize, cfg: &SrilConfig, task: usize) -> Vec<BatchRecord> {
    let mut rng = SeedTree::new(cfg.seed).rng(Stream::Shuffle, task as u32);
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        out.extend(order.chunks(cfg.batch_size).map(|c| BatchRecord {
            epoch,
            indices: c.to_vec(),
        }));
    }
    out
}

/// Trains the model of a pair on one task's data.
pub fn train_pair<S: Scalar>(
    pair: &mut ModelPair<S>,
    data: &Dataset<S>,
    cfg: &SrilConfig,
    state: &TaskState,
    plan: BatchPlan<'_>,
    observer: &mut dyn TrainObserver<S>,
) -> Result<TaskReport> {
    let (old, new) = pair.parts_mut();
    train_task(new, Some(old), data, cfg, state, plan, observer)
}

/// Runs `cfg.epochs` epochs over `data`, whose labels are already in
/// incremental order (classes `< state.n_old()` are old). Without an old
/// model this is plain classification training.
pub fn train_task<S: Scalar>(
    model: &mut Model<S>,
    old: Option<&Model<S>>,
    data: &Dataset<S>,
    cfg: &SrilConfig,
    state: &TaskState,
    plan: BatchPlan<'_>,
    observer: &mut dyn TrainObserver<S>,
) -> Result<TaskReport> {
    cfg.validate()?;
    if model.num_classes() != state.n_seen {
        return Err(TrainError::Misaligned(format!(
            "head has {} classes but {} have been seen",
            model.num_classes(),
            state.n_seen
        )));
    }
    if let Some(old) = old {
        if old.num_classes() != state.n_old() {
            return Err(TrainError::Misaligned(format!(
                "previous model has {} classes, expected {}",
                old.num_classes(),
                state.n_old()
            )));
        }
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= state.n_seen) {
        return Err(TrainError::Misaligned(format!(
            "label {y} outside the {} seen classes",
            state.n_seen
        )));
    }
    model.check_input(data.inputs.shape())?;
    let batches = match plan {
        BatchPlan::Shuffle => draw_batches(data.len(), cfg, state.task),
        BatchPlan::Replay(b) => {
            if let Some(bad) = b
                .iter()
                .find(|r| r.epoch >= cfg.epochs || r.indices.iter().any(|&i| i >= data.len()))
            {
                return Err(TrainError::Config(format!(
                    "replayed batch of epoch {} does not fit",
                    bad.epoch
                )));
            }
            b.to_vec()
        }
    };
    let old = old.filter(|_| state.n_old() > 0);
    let mut velocity: Vec<Vec<S>> = model.params().iter().map(|p| vec![S::zero(); p.numel()]).collect();
    let mut steps = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let lr = cosine_lr(batch.epoch, cfg.epochs, cfg.lr0)?;
        let (record, mask) = train_step(model, old, data, cfg, state, batch, step, lr, &mut velocity, observer)?;
        observer.on_step(&record, mask.as_ref());
        steps.push(record);
    }
    Ok(TaskReport { steps, batches })
}

#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    old: Option<&Model<S>>,
    data: &Dataset<S>,
    cfg: &SrilConfig,
    state: &TaskState,
    batch: &BatchRecord,
    step: usize,
    lr: f64,
    velocity: &mut [Vec<S>],
    observer: &mut dyn TrainObserver<S>,
) -> Result<(StepRecord, Option<ChannelMask>)> {
    let x = data.inputs.select_rows(&batch.indices);
    let y: Vec<usize> = batch.indices.iter().map(|&i| data.labels[i]).collect();
    let n_old_classes = state.n_old();
    let old_rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] < n_old_classes).collect();
    let new_rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] >= n_old_classes).collect();
    let mut record = StepRecord {
        task: state.task,
        step,
        epoch: batch.epoch,
        lr,
        cls_loss: 0.0,
        gfd_loss: 0.0,
        total_loss: 0.0,
        conf_old_model: None,
        conf_new_model: None,
        delta: state.delta,
        gate_fired: false,
        cwi_applied: false,
        mask_rate: None,
        n_old: old_rows.len(),
        n_new: new_rows.len(),
    };

    // Previous model: values only, shared by the gate and distillation.
    let old_inf = old.map(|m| m.infer(&x)).transpose()?;

    if let (Some(old), Some(inf)) = (old, &old_inf) {
        if !old_rows.is_empty() {
            let y_old: Vec<usize> = old_rows.iter().map(|&i| y[i]).collect();
            let conf_old = confidence_from_logits(&inf.logits.select_rows(&old_rows), old.head.eta_abs(), &y_old)?;
            let conf_new = confidence(model, &x.select_rows(&old_rows), &y_old)?;
            let beta = cwi_gate(conf_old, conf_new, state.delta, cfg.alpha);
            record.conf_old_model = Some(conf_old);
            record.conf_new_model = Some(conf_new);
            record.gate_fired = conf_old - conf_new >= state.delta;
            if record.gate_fired && cfg.cwi_enabled {
                let before = model.clone();
                cwi_apply(model, old, beta)?;
                record.cwi_applied = true;
                observer.after_cwi(&before, model, old, beta);
            }
        }
    }

    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let mut fwd = model.forward(&mut tape, &params, xv)?;
    let margin = S::lit(cfg.margin);
    let cls = tape.lsc_loss(fwd.logits, params.eta(), &y, margin)?;
    record.cls_loss = tape.value(cls).item().as_f64();

    let distill = match (&old_inf, cfg.distill_mode) {
        (Some(inf), DistillMode::Gfd | DistillMode::Sfd) => Some(inf),
        _ => None,
    };
    let mut mask = None;
    let total = if let Some(inf) = distill {
        let channels: Vec<usize> = fwd.taps.iter().map(|t| t.channels()).collect();
        let m = match cfg.distill_mode {
            DistillMode::Sfd => ChannelMask::filled(&channels, true),
            _ if new_rows.is_empty() => ChannelMask::filled(&channels, false),
            _ => {
                tape.backward(cls, &mut fwd.taps)?;
                let sel = |t: &Tensor<S>| t.select_rows(&new_rows);
                let taps_new: Vec<_> = fwd.taps.iter().map(|t| sel(&t.value)).collect();
                let taps_old: Vec<_> = inf.taps.iter().map(sel).collect();
                let cls_grads: Vec<_> = fwd
                    .taps
                    .iter()
                    .map(|t| sel(t.grad_slot.as_ref().expect("filled by backward")))
                    .collect();
                gfd_mask(&taps_new, &taps_old, &cls_grads)?
            }
        };
        let sfd = cfg.distill_mode == DistillMode::Sfd;
        let mut terms = Vec::new();
        for (l, tap) in fwd.taps.iter().enumerate() {
            let on = m.weights::<S>(l);
            let off: Vec<S> = if sfd { on.clone() } else { m.complement().weights(l) };
            for (rows, w) in [(&new_rows, on), (&old_rows, off)] {
                if rows.is_empty() {
                    continue;
                }
                let z = tape.select_rows(tap.var, rows)?;
                let fd = fd_channel_loss_on(&mut tape, z, &inf.taps[l].select_rows(rows))?;
                terms.push(tape.weighted_sum(fd, &w)?);
            }
        }
        record.mask_rate = Some(m.activation_rates());
        mask = Some(m);
        match terms.split_first() {
            None => cls,
            Some((&first, rest)) => {
                let mut gfd = first;
                for &t in rest {
                    gfd = tape.add(gfd, t)?;
                }
                record.gfd_loss = tape.value(gfd).item().as_f64();
                let weighted = tape.scale(gfd, S::lit(state.lambda_gfd_t))?;
                tape.add(cls, weighted)?
            }
        }
    } else {
        cls
    };
    record.total_loss = tape.value(total).item().as_f64();
    if !record.total_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(Box::new(record)));
    }

    let grads = tape.backward(total, &mut [])?;
    let grad_refs: Vec<&[S]> = params
        .vars
        .iter()
        .map(|&v| grads.wrt(v).expect("trainable leaf"))
        .collect();
    let hp = SgdParams {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut slices: Vec<&mut [S]> = model.params_mut().into_iter().map(|p| p.data_mut()).collect();
    sgd_step(&mut slices, &grad_refs, velocity, hp)?;
    model.head.normalize_proxies();
    Ok((record, mask))
}

#[cfg(test)]
mod tests;
