//! Small classifier backbones with per-stage feature taps and a
//! local-similarity-classifier head holding K proxies per class.

mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, FeatureTap, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};

/// Width of every mlp-s hidden stage.
pub const MLP_WIDTH: usize = 64;
/// Output channels of the three conv-s stages.
pub const CONV_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input batch has per-sample shape {got:?}, architecture {arch} expects {expected:?}")]
    InputShape {
        arch: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("head expansion needs at least one new class")]
    EmptyExpansion,
    #[error("conv-s needs spatial extents divisible by 8, got {0}×{1}")]
    BadImageSize(usize, usize),
    #[error("perturbation for layer {layer} has shape {got:?}, tap is {expected:?}")]
    PerturbationShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Three fully-connected stages of width 64.
    MlpS { input_dim: usize },
    /// Three 3×3 conv stages (16/32/64 channels), each followed by 2× average pooling.
    ConvS {
        in_channels: usize,
        height: usize,
        width: usize,
    },
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::MlpS { .. } => "mlp-s",
            Architecture::ConvS { .. } => "conv-s",
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            Architecture::MlpS { input_dim } => vec![input_dim],
            Architecture::ConvS {
                in_channels,
                height,
                width,
            } => vec![in_channels, height, width],
        }
    }

    pub fn from_input_shape(id: &str, shape: &[usize]) -> Option<Self> {
        match (id, shape) {
            ("mlp-s", &[input_dim]) => Some(Architecture::MlpS { input_dim }),
            ("conv-s", &[in_channels, height, width]) => Some(Architecture::ConvS {
                in_channels,
                height,
                width,
            }),
            _ => None,
        }
    }

    /// (channels, spatial) of every tap, one per stage.
    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Architecture::MlpS { .. } => vec![(MLP_WIDTH, 1); 3],
            Architecture::ConvS { height, width, .. } => CONV_CHANNELS
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, (height >> (i + 1)) * (width >> (i + 1))))
                .collect(),
        }
    }

    pub fn num_stages(&self) -> usize {
        3
    }

    pub fn embed_dim(&self) -> usize {
        let (c, s) = *self.tap_shapes().last().expect("three stages");
        c * s
    }

    fn validate(&self) -> Result<(), ModelError> {
        if let Architecture::ConvS { height, width, .. } = *self {
            if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
                return Err(ModelError::BadImageSize(height, width));
            }
        }
        Ok(())
    }
}

/// One backbone stage. The last stage has no rectifier so embeddings are
/// not confined to the positive orthant.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S> {
    pub arch: Architecture,
    pub stages: Vec<Stage<S>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut he = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
        };
        let stages = match arch {
            Architecture::MlpS { input_dim } => [input_dim, MLP_WIDTH, MLP_WIDTH]
                .iter()
                .enumerate()
                .map(|(i, &fan_in)| Stage {
                    weight: he(&[fan_in, MLP_WIDTH], fan_in),
                    bias: Tensor::zeros(&[MLP_WIDTH]),
                    relu: i < 2,
                })
                .collect(),
            Architecture::ConvS { in_channels, .. } => {
                let mut prev = in_channels;
                CONV_CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(i, &out)| {
                        let stage = Stage {
                            weight: he(&[out, prev, 3, 3], prev * 9),
                            bias: Tensor::zeros(&[out]),
                            relu: i < 2,
                        };
                        prev = out;
                        stage
                    })
                    .collect()
            }
        };
        Ok(Self { arch, stages })
    }
}

/// Local similarity classifier: class score is the softmax-weighted average
/// of the K proxy similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct LscHead<S> {
    /// (num_classes, K, embed_dim), rows L2-normalized.
    pub proxies: Tensor<S>,
    /// Learnable scale; its absolute value is used.
    pub eta: Tensor<S>,
    pub margin: S,
}

impl<S: Scalar> LscHead<S> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, k: usize, embed_dim: usize, margin: S, rng: &mut R) -> Self {
        let mut head = Self {
            proxies: Tensor::zeros(&[0, k, embed_dim]),
            eta: Tensor::from_vec(vec![S::one()]),
            margin,
        };
        if num_classes > 0 {
            head.expand(num_classes, rng).expect("non-zero expansion");
        }
        head
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.proxies.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.proxies.shape()[2]
    }

    pub fn eta_abs(&self) -> S {
        self.eta.data()[0].abs()
    }

    /// Appends K spherical-normal, L2-normalized proxies per new class.
    /// Existing proxies are untouched.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) -> Result<(), ModelError> {
        if new_classes == 0 {
            return Err(ModelError::EmptyExpansion);
        }
        let (k, d) = (self.k(), self.embed_dim());
        let mut data = std::mem::replace(&mut self.proxies, Tensor::zeros(&[0])).into_data();
        for _ in 0..new_classes * k {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| S::lit(x / norm)));
        }
        let n = data.len() / (k * d);
        self.proxies = Tensor::new(vec![n, k, d], data).expect("proxy buffer consistent");
        Ok(())
    }

    /// Renormalizes every proxy to unit length.
    pub fn normalize_proxies(&mut self) {
        let d = self.embed_dim();
        for row in self.proxies.data_mut().chunks_mut(d.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm > S::zero() {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    /// Class scores for L2-normalized embeddings `z` of shape (B, D).
    pub fn logits(&self, z: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::inference();
        let p = tape.constant(self.proxies.clone());
        let zv = tape.constant(z.clone());
        let out = lsc_logits(&mut tape, p, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Records LSC class scores on `tape`. `proxies` is (N, K, D), `z` is (B, D);
/// the result is (B, N) with `ŷ_c = Σ_k softmax_k(⟨φ_ck, z⟩)·⟨φ_ck, z⟩`.
pub fn lsc_logits<S: Scalar>(tape: &mut Tape<S>, proxies: Var, z: Var) -> Result<Var, AutodiffError> {
    let ps = tape.value(proxies).shape().to_vec();
    let batch = tape.value(z).shape()[0];
    let (n, k, d) = (ps[0], ps[1], ps[2]);
    let flat = tape.reshape(proxies, &[n * k, d])?;
    let flat_t = tape.transpose(flat)?;
    let sims = tape.matmul(z, flat_t)?;
    let sims = tape.reshape(sims, &[batch, n, k])?;
    let weights = tape.softmax_last(sims)?;
    let weighted = tape.mul(weights, sims)?;
    tape.sum_last(weighted)
}

/// Backbone plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub backbone: Backbone<S>,
    pub head: LscHead<S>,
}

/// Tape handles of a model's parameters, in [`Model::param_names`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn proxies(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    pub fn eta(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    pub embedding: Var,
    pub logits: Var,
    pub taps: Vec<FeatureTap<S>>,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone)]
pub struct Inference<S> {
    pub embedding: Tensor<S>,
    pub logits: Tensor<S>,
    pub taps: Vec<Tensor<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng + ?Sized>(
        arch: Architecture,
        num_classes: usize,
        k: usize,
        margin: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let backbone = Backbone::new(arch, rng)?;
        let head = LscHead::new(num_classes, k, arch.embed_dim(), S::lit(margin), rng);
        Ok(Self { backbone, head })
    }

    pub fn arch(&self) -> Architecture {
        self.backbone.arch
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.stages.len() {
            names.push(format!("stage{i}.weight"));
            names.push(format!("stage{i}.bias"));
        }
        names.push("head.proxies".into());
        names.push("head.eta".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = Vec::new();
        for s in &self.backbone.stages {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        out.push(&self.head.proxies);
        out.push(&self.head.eta);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for s in &mut self.backbone.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.head.proxies);
        out.push(&mut self.head.eta);
        out
    }

    /// Records every parameter as a leaf; differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(&p.clone().with_grad())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn check_input(&self, batch_shape: &[usize]) -> Result<(), ModelError> {
        let expected = self.arch().input_shape();
        if batch_shape.len() != expected.len() + 1 || batch_shape[1..] != expected[..] {
            return Err(ModelError::InputShape {
                arch: self.arch().id(),
                expected,
                got: batch_shape.get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<ForwardPass<S>, ModelError> {
        self.forward_perturbed(tape, params, x, None)
    }

    /// Forward pass that adds `perturb.1` to the value of tap `perturb.0`
    /// before the rest of the network reads it. Used for finite-difference
    /// probes of losses with respect to intermediate features.
    pub fn forward_perturbed(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams,
        x: Var,
        perturb: Option<(usize, &Tensor<S>)>,
    ) -> Result<ForwardPass<S>, ModelError> {
        self.check_input(tape.value(x).shape())?;
        let batch = tape.value(x).shape()[0];
        let tap_shapes = self.arch().tap_shapes();
        let mut h = x;
        let mut taps = Vec::with_capacity(tap_shapes.len());
        for (l, stage) in self.backbone.stages.iter().enumerate() {
            let (w, b) = (params.vars[2 * l], params.vars[2 * l + 1]);
            h = match self.arch() {
                Architecture::MlpS { .. } => {
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
                Architecture::ConvS { .. } => {
                    let z = tape.conv2d(h, w, 1)?;
                    tape.add_bias(z, b)?
                }
            };
            if stage.relu {
                h = tape.relu(h)?;
            }
            if matches!(self.arch(), Architecture::ConvS { .. }) {
                h = tape.avg_pool2(h)?;
            }
            let (c, s) = tap_shapes[l];
            let stage_shape = tape.value(h).shape().to_vec();
            let mut t = tape.reshape(h, &[batch, c, s])?;
            if let Some((layer, delta)) = perturb.filter(|(layer, _)| *layer == l) {
                if delta.shape() != [batch, c, s] {
                    return Err(ModelError::PerturbationShape {
                        layer,
                        expected: vec![batch, c, s],
                        got: delta.shape().to_vec(),
                    });
                }
                let dv = tape.constant(delta.clone());
                t = tape.add(t, dv)?;
            }
            // Later stages read through the tap so its gradient sees every consumer.
            h = tape.reshape(t, &stage_shape)?;
            taps.push(tape.tap(l, t)?);
        }
        let (c, s) = *tap_shapes.last().expect("three stages");
        let last = taps.last().expect("three taps").var;
        let flat = tape.reshape(last, &[batch, c * s])?;
        let embedding = tape.normalize_last(flat)?;
        let logits = lsc_logits(tape, params.proxies(), embedding)?;
        Ok(ForwardPass {
            embedding,
            logits,
            taps,
        })
    }

    /// Values-only forward pass.
    pub fn infer(&self, batch: &Tensor<S>) -> Result<Inference<S>, ModelError> {
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let fwd = self.forward(&mut tape, &params, x)?;
        Ok(Inference {
            embedding: tape.value(fwd.embedding).clone(),
            logits: tape.value(fwd.logits).clone(),
            taps: fwd.taps.into_iter().map(|t| t.value).collect(),
        })
    }

    /// Normalized embedding and the per-stage taps of `batch`.
    pub fn forward_with_taps(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, Vec<FeatureTap<S>>), ModelError> {
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let fwd = self.forward(&mut tape, &params, x)?;
        Ok((tape.value(fwd.embedding).clone(), fwd.taps))
    }

    /// Appends proxies for `new_classes` classes.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) -> Result<(), ModelError> {
        self.head.expand(new_classes, rng)
    }

    /// Value-independent deep copy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// SHA-256 over architecture id and the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch().id().as_bytes());
        for p in self.params() {
            for d in p.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.update(self.head.margin.as_f64().to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Same parameters in another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            backbone: Backbone {
                arch: self.backbone.arch,
                stages: self
                    .backbone
                    .stages
                    .iter()
                    .map(|s| Stage {
                        weight: s.weight.cast(),
                        bias: s.bias.cast(),
                        relu: s.relu,
                    })
                    .collect(),
            },
            head: LscHead {
                proxies: self.head.proxies.cast(),
                eta: self.head.eta.cast(),
                margin: T::lit(self.head.margin.as_f64()),
            },
        }
    }
}

/// Frozen previous-task model alongside the model being trained.
#[derive(Debug, Clone)]
pub struct ModelPair<S> {
    old: Model<S>,
    pub new: Model<S>,
}

impl<S: Scalar> ModelPair<S> {
    /// Initializes the new model from the old one and appends proxies for the
    /// classes of the incoming task.
    pub fn for_next_task<R: Rng + ?Sized>(
        previous: &Model<S>,
        new_classes: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let old = previous.snapshot();
        let mut new = previous.snapshot();
        new.expand_head(new_classes, rng)?;
        Ok(Self { old, new })
    }

    pub fn old(&self) -> &Model<S> {
        &self.old
    }

    /// The frozen model and a mutable handle on the trained one.
    pub fn parts_mut(&mut self) -> (&Model<S>, &mut Model<S>) {
        (&self.old, &mut self.new)
    }

    pub fn into_parts(self) -> (Model<S>, Model<S>) {
        (self.old, self.new)
    }
}

#[cfg(test)]
mod tests;
