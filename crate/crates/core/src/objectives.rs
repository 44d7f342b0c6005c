//! Loss terms of the selective-regularization objective and the per-channel
//! binary mask that decides where feature distillation applies.
//!
//! Tap normalization: each sample's channel is L2-normalized over its
//! spatial positions. Fully-connected taps have a single spatial position,
//! where that would collapse every channel to its sign, so for `S = 1` the
//! whole channel vector of a sample is normalized instead.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var, NORM_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{what}: shapes {a:?} and {b:?} are not aligned")]
    Misaligned {
        what: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("feature taps must be (batch, channels, spatial), got {0:?}")]
    TapRank(Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("task must contain at least one class and n_seen ≥ n_task (got n_task={n_task}, n_seen={n_seen})")]
    ClassCounts { n_task: usize, n_seen: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

fn dims3<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, s] => Ok((b, c, s)),
        _ => Err(ObjectiveError::TapRank(t.shape().to_vec())),
    }
}

fn aligned<S: Scalar>(what: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let d = dims3(a)?;
    if a.shape() != b.shape() {
        return Err(ObjectiveError::Misaligned {
            what,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(d)
}

/// Length of the vectors that are normalized independently in a tap of
/// `channels × spatial` per sample.
fn norm_group(channels: usize, spatial: usize) -> usize {
    if spatial == 1 {
        channels
    } else {
        spatial
    }
}

/// Normalized copy of a (B, C, S) tap.
pub fn normalize_tap<S: Scalar>(tap: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, c, s) = dims3(tap)?;
    let group = norm_group(c, s);
    let eps = S::lit(NORM_EPS);
    let mut out = tap.clone();
    for chunk in out.data_mut().chunks_mut(group) {
        let norm = chunk.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm < eps {
            chunk.iter_mut().for_each(|v| *v = S::zero());
        } else {
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

/// Records tap normalization on a tape.
pub fn normalize_tap_on<S: Scalar>(tape: &mut Tape<S>, tap: Var) -> Result<Var> {
    let (b, c, s) = dims3(tape.value(tap))?;
    if s == 1 {
        let flat = tape.reshape(tap, &[b, c])?;
        let n = tape.normalize_last(flat)?;
        Ok(tape.reshape(n, &[b, c, 1])?)
    } else {
        Ok(tape.normalize_last(tap)?)
    }
}

/// Channel-wise feature distillation between aligned taps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFd<S> {
    /// `Σ_b ‖norm(z_new) − norm(z_old)‖²` of each channel, divided by B.
    pub per_channel: Vec<S>,
    /// Sum of `per_channel`.
    pub total: S,
}

pub fn fd_channel_loss<S: Scalar>(tap_new: &Tensor<S>, tap_old: &Tensor<S>) -> Result<ChannelFd<S>> {
    let (b, c, s) = aligned("fd_channel_loss", tap_new, tap_old)?;
    if b == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let (n, o) = (normalize_tap(tap_new)?, normalize_tap(tap_old)?);
    let mut per_channel = vec![S::zero(); c];
    for (i, (&x, &y)) in n.data().iter().zip(o.data()).enumerate() {
        per_channel[(i / s) % c] += (x - y) * (x - y);
    }
    let inv_b = S::one() / S::from_usize_lossy(b);
    per_channel.iter_mut().for_each(|v| *v *= inv_b);
    let total = per_channel.iter().copied().sum();
    Ok(ChannelFd { per_channel, total })
}

/// Tape version of [`fd_channel_loss`]: a length-C vector of per-channel
/// batch-mean losses, differentiable in `tap_new`. `tap_old` is constant.
pub fn fd_channel_loss_on<S: Scalar>(tape: &mut Tape<S>, tap_new: Var, tap_old: &Tensor<S>) -> Result<Var> {
    let (b, _, _) = aligned("fd_channel_loss", tape.value(tap_new), tap_old)?;
    if b == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n = normalize_tap_on(tape, tap_new)?;
    let o = tape.constant(normalize_tap(tap_old)?);
    let diff = tape.sub(n, o)?;
    let sq = tape.square(diff)?;
    let per_channel = tape.channel_sum(sq)?;
    Ok(tape.scale(per_channel, S::one() / S::from_usize_lossy(b))?)
}

/// Analytic gradient of the layer's feature-distillation loss
/// (`fd_channel_loss(..).total`) with respect to `tap_new`.
pub fn fd_gradient<S: Scalar>(tap_new: &Tensor<S>, tap_old: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, s) = aligned("fd_gradient", tap_new, tap_old)?;
    if b == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let group = norm_group(c, s);
    let (u_all, v_all) = (normalize_tap(tap_new)?, normalize_tap(tap_old)?);
    let eps = S::lit(NORM_EPS);
    let scale = S::lit(2.0) / S::from_usize_lossy(b);
    let mut grad = Tensor::zeros(tap_new.shape());
    let chunks = tap_new
        .data()
        .chunks(group)
        .zip(u_all.data().chunks(group))
        .zip(v_all.data().chunks(group))
        .zip(grad.data_mut().chunks_mut(group));
    for (((z, u), v), g) in chunks {
        let norm = z.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm < eps {
            continue;
        }
        // d/dz ‖z/‖z‖ − v‖² = (2/‖z‖)(r − u⟨u, r⟩), r = u − v.
        let u_dot_r = u.iter().zip(v).map(|(&a, &b)| a * (a - b)).sum::<S>();
        for ((gv, &a), &bv) in g.iter_mut().zip(u).zip(v) {
            *gv = scale * ((a - bv) - a * u_dot_r) / norm;
        }
    }
    Ok(grad)
}

/// Per-layer binary channel mask; `true` means distillation is applied to
/// new-class samples and withheld from old-class samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layers: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn filled(channels: &[usize], value: bool) -> Self {
        Self {
            layers: channels.iter().map(|&c| vec![value; c]).collect(),
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.iter().map(|m| !m).collect()).collect(),
        }
    }

    /// Fraction of active channels in each layer.
    pub fn activation_rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                if l.is_empty() {
                    0.0
                } else {
                    l.iter().filter(|&&m| m).count() as f64 / l.len() as f64
                }
            })
            .collect()
    }

    pub fn weights<S: Scalar>(&self, layer: usize) -> Vec<S> {
        self.layers[layer]
            .iter()
            .map(|&m| if m { S::one() } else { S::zero() })
            .collect()
    }
}

/// Cosine of two vectors, defined as 0 when either norm is below 1e-12.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let tiny = S::lit(1e-12);
    let (na, nb) = (
        a.iter().map(|&x| x * x).sum::<S>().sqrt(),
        b.iter().map(|&x| x * x).sum::<S>().sqrt(),
    );
    if na < tiny || nb < tiny {
        return S::zero();
    }
    a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>() / (na * nb)
}

/// Per-channel cosine between two (B, C, S) gradient fields, each channel
/// flattened over batch and spatial positions.
pub fn channel_cosines<S: Scalar>(g_kd: &Tensor<S>, g_cls: &Tensor<S>) -> Result<Vec<S>> {
    let (b, c, s) = aligned("channel_cosines", g_kd, g_cls)?;
    let gather = |t: &Tensor<S>, ch: usize| -> Vec<S> {
        (0..b)
            .flat_map(|bi| t.data()[(bi * c + ch) * s..(bi * c + ch + 1) * s].to_vec())
            .collect()
    };
    Ok((0..c).map(|ch| cosine(&gather(g_kd, ch), &gather(g_cls, ch))).collect())
}

/// Source of `∇_z L_kd` for the mask. The default is the channel-wise
/// feature-distillation gradient; a logit-level variant can be plugged in.
pub trait KdGradient<S: Scalar> {
    fn kd_gradients(&self, taps_new: &[Tensor<S>], taps_old: &[Tensor<S>]) -> Result<Vec<Tensor<S>>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureKd;

impl<S: Scalar> KdGradient<S> for FeatureKd {
    fn kd_gradients(&self, taps_new: &[Tensor<S>], taps_old: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        taps_new.iter().zip(taps_old).map(|(n, o)| fd_gradient(n, o)).collect()
    }
}

/// `M_{l,c} = 1` iff `cos(g_kd, g_cls) ≥ 0` on that channel.
pub fn mask_from_gradients<S: Scalar>(g_kd: &[Tensor<S>], g_cls: &[Tensor<S>]) -> Result<ChannelMask> {
    if g_kd.len() != g_cls.len() {
        return Err(ObjectiveError::Misaligned {
            what: "gfd_mask layers",
            a: vec![g_kd.len()],
            b: vec![g_cls.len()],
        });
    }
    let layers = g_kd
        .iter()
        .zip(g_cls)
        .map(|(k, c)| Ok(channel_cosines(k, c)?.into_iter().map(|v| v >= S::zero()).collect()))
        .collect::<Result<_>>()?;
    Ok(ChannelMask { layers })
}

/// Gradient-based channel mask computed on the new-class samples of a batch:
/// taps of the current model, matching taps of the previous model, and the
/// classification-loss gradient at the current model's taps.
pub fn gfd_mask<S: Scalar>(
    taps_new: &[Tensor<S>],
    taps_old: &[Tensor<S>],
    cls_grads: &[Tensor<S>],
) -> Result<ChannelMask> {
    gfd_mask_with(&FeatureKd, taps_new, taps_old, cls_grads)
}

pub fn gfd_mask_with<S: Scalar>(
    kd: &impl KdGradient<S>,
    taps_new: &[Tensor<S>],
    taps_old: &[Tensor<S>],
    cls_grads: &[Tensor<S>],
) -> Result<ChannelMask> {
    if let Some(t) = taps_new.first() {
        if t.shape().first() == Some(&0) {
            return Err(ObjectiveError::EmptyBatch);
        }
    }
    let g_kd = kd.kd_gradients(taps_new, taps_old)?;
    mask_from_gradients(&g_kd, cls_grads)
}

/// `Σ_{l,c} M·fd_new + (1−M)·fd_old`. A missing old partition contributes 0.
pub fn gfd_loss<S: Scalar>(mask: &ChannelMask, fd_new: &[Vec<S>], fd_old: Option<&[Vec<S>]>) -> Result<S> {
    let check =
        |v: &[Vec<S>]| v.len() == mask.layers.len() && v.iter().zip(&mask.layers).all(|(a, m)| a.len() == m.len());
    if !check(fd_new) || !fd_old.is_none_or(check) {
        return Err(ObjectiveError::Misaligned {
            what: "gfd_loss",
            a: mask.layers.iter().map(Vec::len).collect(),
            b: fd_new.iter().map(Vec::len).collect(),
        });
    }
    let mut total = S::zero();
    for (l, m) in mask.layers.iter().enumerate() {
        for (c, &on) in m.iter().enumerate() {
            if on {
                total += fd_new[l][c];
            } else if let Some(old) = fd_old {
                total += old[l][c];
            }
        }
    }
    Ok(total)
}

/// Batch-mean hinged LSC loss of class scores (B, N).
pub fn lsc_loss<S: Scalar>(scores: &Tensor<S>, labels: &[usize], eta: S, margin: S) -> Result<S> {
    let mut tape = Tape::inference();
    let s = tape.constant(scores.clone());
    let e = tape.constant(Tensor::scalar(eta));
    let l = tape.lsc_loss(s, e, labels, margin)?;
    Ok(tape.value(l).item())
}

/// `λ_gfd · √(n_seen / n_task)`.
pub fn lambda_gfd_t(lambda_gfd: f64, n_seen: usize, n_task: usize) -> Result<f64> {
    if n_task == 0 || n_seen < n_task {
        return Err(ObjectiveError::ClassCounts { n_task, n_seen });
    }
    Ok(lambda_gfd * (n_seen as f64 / n_task as f64).sqrt())
}

/// Loss terms of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub gfd: f64,
    pub total: f64,
    pub mask_activation_rate: Option<Vec<f64>>,
}
