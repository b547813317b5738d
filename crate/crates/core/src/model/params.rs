use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchitectureSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight and bias of one conv or fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Trainable tensors of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// One entry per conv / fully connected layer, in architecture order.
    pub layers: Vec<LayerParams<T>>,
    /// The classifier vector `w`, shape `[feature_width]`.
    pub classifier_w: Tensor<T>,
    /// Scalar classifier offset, shape `[1]`, zero unless trained.
    pub classifier_bias: Tensor<T>,
}

/// Gain applied to `1/sqrt(fan_in)` for layers followed by a ReLU.
const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters shaped for `arch`.
    pub fn zeros(arch: &ArchitectureSpec) -> Result<Self> {
        let (shapes, _) = arch.param_shapes()?;
        let tensors = shapes.into_iter().map(|p| Tensor::zeros(p.shape).with_grad()).collect();
        Ok(Self::from_flat(tensors))
    }

    /// Seeded uniform initialization: weights ~ U(−a, a) with
    /// `a = gain / sqrt(fan_in)`, biases zero.
    ///
    /// Layers followed by a ReLU use gain √6 so activations keep their scale
    /// through the stack; the classifier uses gain 1.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let (shapes, _) = arch.param_shapes()?;
        let relu_after = relu_flags(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, p) in shapes.into_iter().enumerate() {
            let t = if p.name.ends_with("bias") {
                Tensor::zeros(p.shape)
            } else {
                let gain = if relu_after.get(i / 2).copied().unwrap_or(false) { RELU_GAIN } else { 1.0 };
                let a = gain / (p.fan_in as f64).sqrt();
                Tensor::from_fn(p.shape, |_| T::lit(rng.random_range(-a..a)))
            };
            tensors.push(t.with_grad());
        }
        Ok(Self::from_flat(tensors))
    }

    fn from_flat(mut tensors: Vec<Tensor<T>>) -> Self {
        let classifier_bias = tensors.pop().expect("classifier bias");
        let classifier_w = tensors.pop().expect("classifier w");
        let mut layers = Vec::with_capacity(tensors.len() / 2);
        let mut it = tensors.into_iter();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(LayerParams { weight, bias });
        }
        Self {
            layers,
            classifier_w,
            classifier_bias,
        }
    }

    /// Builds parameters from tensors in [`ArchitectureSpec::param_shapes`]
    /// order, checking every shape.
    pub fn from_tensors(arch: &ArchitectureSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let (shapes, _) = arch.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(Error::Consistency(format!(
                "architecture has {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (p, t) in shapes.iter().zip(&tensors) {
            if p.shape != t.shape() {
                return Err(Error::Consistency(format!(
                    "{} should have shape {:?}, got {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self::from_flat(tensors))
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.push(&self.classifier_w);
        out.push(&self.classifier_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_bias);
        out
    }

    /// `(name, tensor)` pairs in checkpoint order.
    pub fn named_tensors(&self, arch: &ArchitectureSpec) -> Result<Vec<(String, &Tensor<T>)>> {
        self.check(arch)?;
        let (shapes, _) = arch.param_shapes()?;
        Ok(shapes.into_iter().map(|p| p.name).zip(self.tensors()).collect())
    }

    /// Verifies every tensor has the shape `arch` dictates and is finite.
    pub fn check(&self, arch: &ArchitectureSpec) -> Result<()> {
        let (shapes, _) = arch.param_shapes()?;
        let tensors = self.tensors();
        if shapes.len() != tensors.len() {
            return Err(Error::Consistency(format!(
                "architecture has {} parameter tensors, params have {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (p, t) in shapes.iter().zip(tensors) {
            if p.shape != t.shape() {
                return Err(Error::Consistency(format!(
                    "{} should have shape {:?}, got {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{} contains NaN or Inf", p.name)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            classifier_w: self.classifier_w.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn relu_flags(arch: &ArchitectureSpec) -> Vec<bool> {
    arch.layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv(c) => c.relu,
            LayerSpec::FullyConnected { relu, .. } => *relu,
            LayerSpec::Classifier { .. } => false,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::build_reduced_arch;

    #[test]
    fn init_is_deterministic_in_seed() {
        let arch = build_reduced_arch(8).unwrap();
        let a = ModelParams::<f64>::init(&arch, 7).unwrap();
        let b = ModelParams::<f64>::init(&arch, 7).unwrap();
        let c = ModelParams::<f64>::init(&arch, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check(&arch).unwrap();
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let arch = build_reduced_arch(8).unwrap();
        let p = ModelParams::<f64>::init(&arch, 1).unwrap();
        let (shapes, _) = arch.param_shapes().unwrap();
        for (s, t) in shapes.iter().zip(p.tensors()) {
            let bound = RELU_GAIN / (s.fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{}", s.name);
        }
        assert!(p.classifier_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_shape_is_consistency_error() {
        let arch = build_reduced_arch(8).unwrap();
        let mut p = ModelParams::<f32>::zeros(&arch).unwrap();
        p.classifier_w = Tensor::zeros([3]);
        assert!(matches!(p.check(&arch), Err(Error::Consistency(_))));
    }
}
