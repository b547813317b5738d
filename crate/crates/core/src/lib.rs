//! Automated quality triage for colour fundus photographs.
//!
//! A convolutional network is trained with a margin hinge loss to score
//! images; scores are banded into accept / ambiguous / reject verdicts.
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod ops;
pub mod optim;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use dataset::{BinaryClass, Consensus, DatasetManifest, GradeRecord};
pub use error::{Error, Result};
pub use eval::{Band, BandThresholds, EvalReport, QualityVerdict};
pub use kernels::LrnParams;
pub use model::{ArchitectureSpec, Model, ModelParams};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainHistory};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type LabeledImages32 = trainer::LabeledImages<f32>;
