//! Class-incremental learning with selective regularization: gradient-masked
//! channel-wise feature distillation and confidence-gated weight
//! interpolation, plus the protocol and metrics around them.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the element type used by experiments.
// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{FeatureTap, Gradients, OpKind, Tape, Var};
pub use model::{Architecture, LscHead, Model, ModelPair};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
