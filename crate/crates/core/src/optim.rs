//! Plain stochastic gradient descent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `p ← p − lr·∇p` for every parameter, then zeroes the gradients.
///
/// Nothing is modified unless every parameter carries a gradient.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], learning_rate: T) -> Result<()> {
    if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::State(format!(
            "parameter {i} (shape {:?}) has no gradient",
            params[i].shape()
        )));
    }
    for p in params.iter_mut() {
        let (grad, data) = p.grad_and_data_mut();
        let grad = grad.expect("checked above");
        for (v, g) in data.iter_mut().zip(grad.iter_mut()) {
            *v -= learning_rate * *g;
            *g = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor<f64> {
        let mut p = Tensor::new([1], vec![value]).unwrap().with_grad();
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn single_step() {
        let mut p = param(1.0, 0.5);
        sgd_step(&mut [&mut p], 0.01).unwrap();
        assert_eq!(p.data(), &[0.995]);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_grad_or_zero_lr_is_noop() {
        let mut p = param(1.0, 0.0);
        sgd_step(&mut [&mut p], 0.01).unwrap();
        assert_eq!(p.data(), &[1.0]);
        let mut q = param(1.0, 3.0);
        sgd_step(&mut [&mut q], 0.0).unwrap();
        assert_eq!(q.data(), &[1.0]);
    }

    #[test]
    fn missing_grad_is_state_error_and_nothing_moves() {
        let mut a = param(1.0, 1.0);
        let mut b = Tensor::new([1], vec![2.0]).unwrap().with_grad();
        let err = sgd_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert_eq!(a.data(), &[1.0]);
    }
}
