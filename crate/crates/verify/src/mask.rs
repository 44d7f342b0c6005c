//! Finite-difference recomputation of the per-channel gradient cosines that
//! decide the distillation mask.

use rand::Rng;
use sril_core::autodiff::Tape;
use sril_core::model::{Architecture, Model};
use sril_core::objectives::{fd_channel_loss, gfd_loss, gfd_mask, lsc_loss, ChannelMask};
use sril_core::rng::{SeedTree, Stream};
use sril_core::Tensor;

use crate::gradients::central_diff;
use crate::Check;

/// Cosines below this magnitude are too close to the decision boundary to
/// compare signs.
pub const COS_BAND: f64 = 1e-6;

pub struct MaskInstance {
    pub old: Model<f64>,
    pub new: Model<f64>,
    /// New-class samples only.
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl MaskInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).rng(Stream::Init, 200);
        let arch = if seed % 4 == 3 {
            Architecture::ConvS {
                in_channels: 1,
                height: 8,
                width: 8,
            }
        } else {
            Architecture::MlpS {
                input_dim: rng.random_range(2..7),
            }
        };
        let old = Model::new(arch, 2, 2, 0.3, &mut rng).unwrap();
        // The new model starts from the old one, as in training, then drifts.
        let mut new = old.clone();
        new.expand_head(2, &mut rng).unwrap();
        for p in new.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let batch = match arch {
            Architecture::ConvS { .. } => 2,
            Architecture::MlpS { .. } => rng.random_range(2..5),
        };
        let mut shape = vec![batch];
        shape.extend(arch.input_shape());
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let labels = (0..batch).map(|i| 2 + i % 2).collect();
        Self { old, new, x, labels }
    }

    /// The mask as the trainer builds it: analytic distillation gradients
    /// and classification gradients captured at the taps.
    pub fn library_mask(&self) -> ChannelMask {
        let mut tape = Tape::new();
        let params = self.new.bind(&mut tape, true);
        let x = tape.constant(self.x.clone());
        let mut fwd = self.new.forward(&mut tape, &params, x).unwrap();
        let cls = tape
            .lsc_loss(fwd.logits, params.eta(), &self.labels, self.new.head.margin)
            .unwrap();
        tape.backward(cls, &mut fwd.taps).unwrap();
        let taps_new: Vec<_> = fwd.taps.iter().map(|t| t.value.clone()).collect();
        let cls_grads: Vec<_> = fwd.taps.iter().map(|t| t.grad_slot.clone().unwrap()).collect();
        let taps_old = self.old.infer(&self.x).unwrap().taps;
        gfd_mask(&taps_new, &taps_old, &cls_grads).unwrap()
    }

    fn cls_with_perturbation(&self, layer: usize, delta: &Tensor<f64>) -> f64 {
        let mut tape = Tape::inference();
        let params = self.new.bind(&mut tape, false);
        let x = tape.constant(self.x.clone());
        let fwd = self
            .new
            .forward_perturbed(&mut tape, &params, x, Some((layer, delta)))
            .unwrap();
        lsc_loss(
            tape.value(fwd.logits),
            &self.labels,
            self.new.head.eta_abs(),
            self.new.head.margin,
        )
        .unwrap()
    }

    /// Per-layer, per-channel cosines from finite differences of both losses.
    pub fn numeric_cosines(&self) -> Vec<Vec<f64>> {
        let taps_new = self.new.infer(&self.x).unwrap().taps;
        let taps_old = self.old.infer(&self.x).unwrap().taps;
        let mut out = Vec::new();
        for (l, (zn, zo)) in taps_new.iter().zip(&taps_old).enumerate() {
            let shape = zn.shape().to_vec();
            let (b, c, s) = (shape[0], shape[1], shape[2]);
            let coords: Vec<usize> = (0..zn.numel()).collect();
            // The distillation loss is not differentiable where a
            // normalization group of the current tap is exactly zero (a dead
            // channel); its gradient there is zero by convention.
            let group = |i: usize| if s == 1 { i / c } else { i / s };
            let mut group_norm = vec![0.0; zn.numel()];
            for (i, &v) in zn.data().iter().enumerate() {
                group_norm[group(i)] += v * v;
            }
            let smooth: Vec<usize> = coords
                .iter()
                .copied()
                .filter(|&i| group_norm[group(i)] > 1e-12)
                .collect();
            let mut g_kd = vec![0.0; zn.numel()];
            let partial = central_diff(zn.data(), &smooth, &mut |v| {
                let z = Tensor::new(shape.clone(), v.to_vec()).unwrap();
                fd_channel_loss(&z, zo).unwrap().total
            });
            for (&i, g) in smooth.iter().zip(partial) {
                g_kd[i] = g;
            }
            let zero = vec![0.0; zn.numel()];
            let g_cls = central_diff(&zero, &coords, &mut |v| {
                self.cls_with_perturbation(l, &Tensor::new(shape.clone(), v.to_vec()).unwrap())
            });
            let cosines = (0..c)
                .map(|ch| {
                    let idx: Vec<usize> = (0..b)
                        .flat_map(|bi| (0..s).map(move |si| (bi * c + ch) * s + si))
                        .collect();
                    let dot: f64 = idx.iter().map(|&i| g_kd[i] * g_cls[i]).sum();
                    let nk: f64 = idx.iter().map(|&i| g_kd[i] * g_kd[i]).sum::<f64>().sqrt();
                    let nc: f64 = idx.iter().map(|&i| g_cls[i] * g_cls[i]).sum::<f64>().sqrt();
                    if nk < 1e-12 || nc < 1e-12 {
                        0.0
                    } else {
                        dot / (nk * nc)
                    }
                })
                .collect();
            out.push(cosines);
        }
        out
    }
}

/// Outcome of one instance: channels compared and disagreements.
pub fn compare_instance(inst: &MaskInstance) -> (usize, usize) {
    let mask = inst.library_mask();
    let cos = inst.numeric_cosines();
    let mut compared = 0;
    let mut wrong = 0;
    for (ml, cl) in mask.layers.iter().zip(&cos) {
        for (&m, &c) in ml.iter().zip(cl) {
            if c.abs() >= COS_BAND {
                compared += 1;
                wrong += usize::from(m != (c >= 0.0));
            }
        }
    }
    (compared, wrong)
}

pub fn check_mask_instances(count: u64) -> Vec<Check> {
    let mut compared = 0;
    let mut wrong = 0;
    for seed in 0..count {
        let (c, w) = compare_instance(&MaskInstance::random(seed));
        compared += c;
        wrong += w;
    }
    vec![Check::new(
        "mask/finite-difference-signs",
        wrong == 0 && compared > 0,
        format!("{count} instances, {compared} channels compared, {wrong} disagree"),
    )]
}

/// `gfd(M) + gfd(1−M) = Σ (fd_new + fd_old)` on dyadic values, where every
/// sum is exact.
pub fn check_complementarity(count: u64) -> Vec<Check> {
    let mut rng = SeedTree::new(1).rng(Stream::Data, 300);
    let mut failures = 0;
    for _ in 0..count {
        let layers: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..9)).collect();
        let mut dyadic = || -> Vec<Vec<f64>> {
            layers
                .iter()
                .map(|&c| (0..c).map(|_| f64::from(rng.random_range(0u8..64)) / 64.0).collect())
                .collect()
        };
        let (a, b) = (dyadic(), dyadic());
        let mask = ChannelMask {
            layers: layers
                .iter()
                .map(|&c| (0..c).map(|_| rng.random::<bool>()).collect())
                .collect(),
        };
        let lhs = gfd_loss(&mask, &a, Some(&b)).unwrap() + gfd_loss(&mask.complement(), &a, Some(&b)).unwrap();
        let rhs: f64 = a.iter().flatten().chain(b.iter().flatten()).sum();
        failures += usize::from(lhs != rhs);
    }
    vec![Check::new(
        "mask/complementarity",
        failures == 0,
        format!("{count} random masks, {failures} mismatches"),
    )]
}
