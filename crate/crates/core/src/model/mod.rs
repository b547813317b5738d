//! The quality-scoring network: architecture, parameters, forward pass and
//! checkpoints.

mod arch;
mod checkpoint;
mod params;

pub use arch::{
    build_default_arch, build_reduced_arch, ArchitectureSpec, ConvSpec, InputShape, LayerSpec, LrnSpec, ParamShape,
    PoolSpec,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, MAGIC};
pub use params::{LayerParams, ModelParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::LrnParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tape handles for every parameter of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub classifier_w: Var,
    pub classifier_bias: Var,
}

impl ParamVars {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.classifier_w);
        v.push(self.classifier_bias);
        v
    }
}

/// Records borrowed parameter leaves on `tape`.
pub fn record_params<'a, T: Scalar>(tape: &mut Tape<'a, T>, params: &'a ModelParams<T>) -> ParamVars {
    let layers = params
        .layers
        .iter()
        .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
        .collect();
    ParamVars {
        layers,
        classifier_w: tape.leaf(&params.classifier_w),
        classifier_bias: tape.leaf(&params.classifier_bias),
    }
}

fn check_input(arch: &ArchitectureSpec, shape: &[usize]) -> Result<usize> {
    let i = arch.input;
    match shape {
        &[n, c, h, w] if c == i.channels && h == i.height && w == i.width => Ok(n),
        _ => Err(Error::InvalidShape(format!(
            "image batch {shape:?} does not match network input [N, {}, {}, {}]",
            i.channels, i.height, i.width
        ))),
    }
}

/// Runs the conv and fully connected stack, producing `[N, feature_width]`.
pub fn features_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    arch: &ArchitectureSpec,
    vars: &ParamVars,
    input: Var,
) -> Result<Var> {
    let n = check_input(arch, tape.shape(input)?)?;
    let mut x = input;
    let mut flat = false;
    let mut layer_vars = vars.layers.iter();
    for layer in &arch.layers {
        match layer {
            LayerSpec::Conv(c) => {
                let &(w, b) = layer_vars.next().ok_or_else(missing_params)?;
                x = tape.conv2d(x, w, b, c.stride, c.padding)?;
                if c.relu {
                    x = tape.relu(x)?;
                }
                if let Some(l) = c.lrn {
                    x = tape.lrn(
                        x,
                        LrnParams {
                            depth: l.depth,
                            k: T::lit(l.k),
                            alpha: T::lit(l.alpha),
                            beta: T::lit(l.beta),
                        },
                    )?;
                }
                if let Some(p) = c.pool {
                    x = tape.maxpool2d(x, p.window, p.stride)?;
                }
            }
            LayerSpec::FullyConnected { relu, .. } => {
                if !flat {
                    let width = tape.shape(x)?.iter().skip(1).product();
                    x = tape.reshape(x, &[n, width])?;
                    flat = true;
                }
                let &(w, b) = layer_vars.next().ok_or_else(missing_params)?;
                x = tape.linear(x, w, b)?;
                if *relu {
                    x = tape.relu(x)?;
                }
            }
            LayerSpec::Classifier { .. } => {}
        }
    }
    if !flat {
        let width = tape.shape(x)?.iter().skip(1).product();
        x = tape.reshape(x, &[n, width])?;
    }
    Ok(x)
}

fn missing_params() -> Error {
    Error::Consistency("fewer parameter tensors than layers".into())
}

/// Classifier scores `w·features + b`, shape `[N]`.
pub fn scores_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    arch: &ArchitectureSpec,
    vars: &ParamVars,
    input: Var,
) -> Result<Var> {
    let n = check_input(arch, tape.shape(input)?)?;
    let features = features_on_tape(tape, arch, vars, input)?;
    let width = tape.shape(features)?[1];
    let w = tape.reshape(vars.classifier_w, &[1, width])?;
    let s = tape.linear(features, w, vars.classifier_bias)?;
    tape.reshape(s, &[n])
}

/// An architecture together with matching parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchitectureSpec,
    params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: ArchitectureSpec, params: ModelParams<T>) -> Result<Self> {
        params.check(&arch)?;
        Ok(Self { arch, params })
    }

    pub fn init(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, seed)?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ArchitectureSpec, ModelParams<T>) {
        (self.arch, self.params)
    }

    /// Feature encoding of a single `[1, C, H, W]` image.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let n = check_input(&self.arch, image.shape())?;
        if n != 1 {
            return Err(Error::InvalidShape(format!(
                "features() takes one image, got a batch of {n}"
            )));
        }
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, &self.params);
        let x = tape.leaf(image);
        let f = features_on_tape(&mut tape, &self.arch, &vars, x)?;
        let width = tape.shape(f)?[1];
        tape.tensor(f)?.reshape([width])
    }

    /// Classifier score of a single `[1, C, H, W]` image.
    pub fn score(&self, image: &Tensor<T>) -> Result<T> {
        let scores = self.scores(image)?;
        match scores.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::InvalidShape(format!(
                "score() takes one image, got a batch of {}",
                scores.len()
            ))),
        }
    }

    /// Scores for a `[N, C, H, W]` batch.
    pub fn scores(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, &self.params);
        let x = tape.leaf(batch);
        let s = scores_on_tape(&mut tape, &self.arch, &vars, x)?;
        Ok(tape.value(s)?.to_vec())
    }
}
