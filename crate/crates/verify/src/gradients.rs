//! Central finite differences against reverse-mode gradients.

use rand::Rng;
use sril_core::autodiff::{Tape, Var};
use sril_core::model::{Architecture, Model};
use sril_core::objectives::{fd_channel_loss, fd_channel_loss_on, gfd_loss, lsc_loss, ChannelMask};
use sril_core::rng::{SeedTree, Stream};
use sril_core::{OpKind, Tensor};

use crate::Check;

/// Pass threshold on the largest elementwise relative error.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences carry
/// about 1e-10 of rounding noise, so entries whose true gradient cancels to
/// zero are compared in absolute terms (to `REL_TOL · REL_FLOOR`).
pub const REL_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-6;

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at every coordinate of `x` listed in `coords`.
pub fn central_diff(x: &[f64], coords: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            buf[i] = x[i] + STEP;
            let plus = f(&buf);
            buf[i] = x[i] - STEP;
            let minus = f(&buf);
            buf[i] = x[i];
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

struct OpCase {
    kind: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn cases(seed: u64) -> Vec<OpCase> {
    let mut rng = SeedTree::new(seed).rng(Stream::Data, 7);
    let r = &mut rng;
    let u = |r: &mut _, s: &[usize]| uniform(r, s, -1.0, 1.0);
    vec![
        OpCase {
            kind: OpKind::MatMul,
            inputs: vec![u(r, &[3, 4]), u(r, &[4, 2])],
            build: |t, v| t.matmul(v[0], v[1]).unwrap(),
        },
        OpCase {
            kind: OpKind::Transpose,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.transpose(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Conv2d,
            inputs: vec![u(r, &[2, 2, 5, 4]), u(r, &[3, 2, 3, 3])],
            build: |t, v| t.conv2d(v[0], v[1], 1).unwrap(),
        },
        OpCase {
            kind: OpKind::Add,
            inputs: vec![u(r, &[3, 4]), u(r, &[3, 4])],
            build: |t, v| t.add(v[0], v[1]).unwrap(),
        },
        OpCase {
            kind: OpKind::AddBias,
            inputs: vec![u(r, &[2, 3, 4]), u(r, &[3])],
            build: |t, v| t.add_bias(v[0], v[1]).unwrap(),
        },
        OpCase {
            kind: OpKind::Sub,
            inputs: vec![u(r, &[3, 4]), u(r, &[3, 4])],
            build: |t, v| t.sub(v[0], v[1]).unwrap(),
        },
        OpCase {
            kind: OpKind::Mul,
            inputs: vec![u(r, &[3, 4]), u(r, &[3, 4])],
            build: |t, v| t.mul(v[0], v[1]).unwrap(),
        },
        OpCase {
            kind: OpKind::Scale,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.scale(v[0], -1.7).unwrap(),
        },
        OpCase {
            kind: OpKind::Square,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.square(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Relu,
            inputs: vec![off_zero(r, &[3, 4])],
            build: |t, v| t.relu(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::AvgPool2,
            inputs: vec![u(r, &[2, 3, 4, 6])],
            build: |t, v| t.avg_pool2(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Reshape,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.reshape(v[0], &[2, 6]).unwrap(),
        },
        OpCase {
            kind: OpKind::NormalizeLast,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.normalize_last(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::SoftmaxLast,
            inputs: vec![uniform(r, &[3, 4], -3.0, 3.0)],
            build: |t, v| t.softmax_last(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Log,
            inputs: vec![uniform(r, &[3, 4], 0.2, 2.0)],
            build: |t, v| t.log(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Exp,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.exp(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Sum,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.sum(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::Mean,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| t.mean(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::SumLast,
            inputs: vec![u(r, &[2, 3, 4])],
            build: |t, v| t.sum_last(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::SelectRows,
            inputs: vec![u(r, &[4, 3])],
            build: |t, v| t.select_rows(v[0], &[2, 0, 2]).unwrap(),
        },
        OpCase {
            kind: OpKind::ChannelSum,
            inputs: vec![u(r, &[2, 3, 4])],
            build: |t, v| t.channel_sum(v[0]).unwrap(),
        },
        OpCase {
            kind: OpKind::WeightedSum,
            inputs: vec![u(r, &[3, 4])],
            build: |t, v| {
                t.weighted_sum(v[0], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.3, 0.7, 1.1, -2.0, 0.2, 0.9, -0.6])
                    .unwrap()
            },
        },
        OpCase {
            kind: OpKind::LscLoss,
            inputs: vec![u(r, &[4, 5]), Tensor::scalar(1.3)],
            build: |t, v| t.lsc_loss(v[0], v[1], &[0, 3, 1, 4], 0.2).unwrap(),
        },
        OpCase {
            kind: OpKind::LscLoss,
            inputs: vec![u(r, &[4, 5]), Tensor::scalar(-0.8)],
            build: |t, v| t.lsc_loss(v[0], v[1], &[2, 2, 0, 1], 0.6).unwrap(),
        },
    ]
}

/// Fixed pseudo-random weights that turn any output into a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect()
}

fn eval_case(build: Build, inputs: &[Tensor<f64>], grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            if grad {
                tape.leaf(&x.clone().with_grad())
            } else {
                tape.constant(x.clone())
            }
        })
        .collect();
    let y = build(&mut tape, &vars);
    let w = projection(tape.value(y).numel());
    let s = tape.weighted_sum(y, &w).unwrap();
    let value = tape.value(s).item();
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(s, &mut []).unwrap();
    (value, vars.iter().map(|&v| g.wrt(v).unwrap().to_vec()).collect())
}

/// One check per differentiable op kind.
pub fn check_all_ops() -> Vec<Check> {
    let all = cases(0);
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let mut worst: f64 = 0.0;
        let mut seen = false;
        for case in all.iter().filter(|c| c.kind == kind) {
            seen = true;
            let (_, analytic) = eval_case(case.build, &case.inputs, true);
            for (i, x) in case.inputs.iter().enumerate() {
                let coords: Vec<usize> = (0..x.numel()).collect();
                let numeric = central_diff(x.data(), &coords, &mut |v| {
                    let mut inputs = case.inputs.clone();
                    inputs[i] = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                    eval_case(case.build, &inputs, false).0
                });
                worst = worst.max(max_rel_error(&analytic[i], &numeric));
            }
        }
        out.push(Check::new(
            format!("grad/op/{kind}"),
            seen && worst < REL_TOL,
            if seen {
                format!("max rel err {worst:.2e}")
            } else {
                "no case".into()
            },
        ));
    }
    out
}

/// Small instance with an old model, a new model that has two extra
/// classes, a mixed batch and a fixed channel mask.
pub struct LossInstance {
    pub old: Model<f64>,
    pub new: Model<f64>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub n_old_classes: usize,
    pub mask: ChannelMask,
    pub lambda: f64,
}

impl LossInstance {
    pub fn mlp(seed: u64) -> Self {
        Self::build(Architecture::MlpS { input_dim: 5 }, seed, 6)
    }

    pub fn conv(seed: u64) -> Self {
        Self::build(
            Architecture::ConvS {
                in_channels: 1,
                height: 8,
                width: 8,
            },
            seed,
            4,
        )
    }

    fn build(arch: Architecture, seed: u64, batch: usize) -> Self {
        let tree = SeedTree::new(seed);
        let mut rng = tree.rng(Stream::Init, 100);
        let old = Model::new(arch, 2, 3, 0.2, &mut rng).unwrap();
        let mut new = Model::new(arch, 2, 3, 0.2, &mut rng).unwrap();
        new.expand_head(2, &mut rng).unwrap();
        new.head.eta.data_mut()[0] = 1.4;
        let mut shape = vec![batch];
        shape.extend(arch.input_shape());
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|i| i % 4).collect();
        let channels: Vec<usize> = arch.tap_shapes().iter().map(|&(c, _)| c).collect();
        let mask = ChannelMask {
            layers: channels
                .iter()
                .map(|&c| (0..c).map(|_| rng.random::<bool>()).collect())
                .collect(),
        };
        Self {
            old,
            new,
            x,
            labels,
            n_old_classes: 2,
            mask,
            lambda: 2.0f64.sqrt() * 2.0,
        }
    }

    fn rows(&self, old: bool) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| (self.labels[i] < self.n_old_classes) == old)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Cls,
    Fd,
    Total,
}

/// Value-only evaluation through the non-differentiable reference paths.
pub fn loss_value(inst: &LossInstance, model: &Model<f64>, term: LossTerm) -> f64 {
    let inf = model.infer(&inst.x).unwrap();
    let cls = lsc_loss(&inf.logits, &inst.labels, model.head.eta_abs(), model.head.margin).unwrap();
    if term == LossTerm::Cls {
        return cls;
    }
    let old_inf = inst.old.infer(&inst.x).unwrap();
    let part = |rows: &[usize]| -> Vec<Vec<f64>> {
        inf.taps
            .iter()
            .zip(&old_inf.taps)
            .map(|(n, o)| {
                fd_channel_loss(&n.select_rows(rows), &o.select_rows(rows))
                    .unwrap()
                    .per_channel
            })
            .collect()
    };
    let (new_rows, old_rows) = (inst.rows(false), inst.rows(true));
    let fd = gfd_loss(&inst.mask, &part(&new_rows), Some(&part(&old_rows))).unwrap();
    match term {
        LossTerm::Fd => fd,
        _ => cls + inst.lambda * fd,
    }
}

/// Reverse-mode gradient of the same loss with respect to every parameter.
pub fn loss_gradient(inst: &LossInstance, term: LossTerm) -> Vec<Vec<f64>> {
    let model = &inst.new;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(inst.x.clone());
    let fwd = model.forward(&mut tape, &params, x).unwrap();
    let cls = tape
        .lsc_loss(fwd.logits, params.eta(), &inst.labels, model.head.margin)
        .unwrap();
    let old_inf = inst.old.infer(&inst.x).unwrap();
    let mut fd = None;
    for (l, tap) in fwd.taps.iter().enumerate() {
        let on: Vec<f64> = inst.mask.weights(l);
        let off: Vec<f64> = inst.mask.complement().weights(l);
        for (rows, w) in [(inst.rows(false), on), (inst.rows(true), off)] {
            let z = tape.select_rows(tap.var, &rows).unwrap();
            let per = fd_channel_loss_on(&mut tape, z, &old_inf.taps[l].select_rows(&rows)).unwrap();
            let term = tape.weighted_sum(per, &w).unwrap();
            fd = Some(match fd {
                None => term,
                Some(acc) => tape.add(acc, term).unwrap(),
            });
        }
    }
    let fd = fd.unwrap();
    let loss = match term {
        LossTerm::Cls => cls,
        LossTerm::Fd => fd,
        LossTerm::Total => {
            let s = tape.scale(fd, inst.lambda).unwrap();
            tape.add(cls, s).unwrap()
        }
    };
    let g = tape.backward(loss, &mut []).unwrap();
    params.vars.iter().map(|&v| g.wrt(v).unwrap().to_vec()).collect()
}

fn compare_model(inst: &LossInstance, term: LossTerm, coords_per_param: Option<usize>, seed: u64) -> f64 {
    let analytic = loss_gradient(inst, term);
    let mut rng = SeedTree::new(seed).rng(Stream::Data, 99);
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        let base = inst.new.params()[p].clone();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < base.numel() => (0..k).map(|_| rng.random_range(0..base.numel())).collect(),
            _ => (0..base.numel()).collect(),
        };
        let numeric = central_diff(base.data(), &coords, &mut |v| {
            let mut m = inst.new.clone();
            m.params_mut()[p].data_mut().copy_from_slice(v);
            loss_value(inst, &m, term)
        });
        let picked: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        worst = worst.max(max_rel_error(&picked, &numeric));
    }
    worst
}

/// Classification, distillation and combined losses of a 3-stage mlp-s,
/// every parameter coordinate.
pub fn check_model_losses(seed: u64) -> Vec<Check> {
    let inst = LossInstance::mlp(seed);
    [(LossTerm::Cls, "cls"), (LossTerm::Fd, "fd"), (LossTerm::Total, "total")]
        .into_iter()
        .map(|(term, name)| {
            let worst = compare_model(&inst, term, None, seed);
            Check::new(
                format!("grad/mlp-s/{name}"),
                worst < REL_TOL,
                format!("max rel err {worst:.2e}"),
            )
        })
        .collect()
}

/// Combined loss of a small conv-s model on sampled coordinates.
pub fn check_conv_model(seed: u64) -> Vec<Check> {
    let inst = LossInstance::conv(seed);
    let worst = compare_model(&inst, LossTerm::Total, Some(24), seed);
    vec![Check::new(
        "grad/conv-s/total",
        worst < REL_TOL,
        format!("max rel err {worst:.2e}"),
    )]
}
