//! Shape-checked forward operators on [`Tensor`]s.
//!
//! These run without recording anything; [`crate::autodiff::Tape`] exposes
//! the same operators with gradients.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, LrnParams, PoolGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let mismatch = || {
        Error::InvalidShape(format!(
            "conv2d input {input:?} incompatible with kernel {kernel:?} / bias {bias:?} \
             (stride {stride}, padding {padding})"
        ))
    };
    let (&[n, c, h, w], &[k, kc, kh, kw]) = (input, kernel) else {
        return Err(mismatch());
    };
    if stride == 0 || kc != c || bias != [k] || kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(mismatch());
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: w,
        filters: k,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

pub(crate) fn pool_geometry(input: &[usize], window: usize, stride: usize) -> Result<PoolGeometry> {
    let &[n, c, h, w] = input else {
        return Err(Error::InvalidShape(format!(
            "maxpool2d expects a 4-d input, got {input:?}"
        )));
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::InvalidShape(format!(
            "pool window {window} (stride {stride}) does not fit input {input:?}"
        )));
    }
    Ok(PoolGeometry {
        planes: n * c,
        in_h: h,
        in_w: w,
        window,
        stride,
        out_h: (h - window) / stride + 1,
        out_w: (w - window) / stride + 1,
    })
}

/// `(channels, plane)` for a 4-d LRN input.
pub(crate) fn lrn_layout(input: &[usize], depth: usize) -> Result<(usize, usize)> {
    match input {
        &[_, c, h, w] if depth >= 1 => Ok((c, h * w)),
        _ => Err(Error::InvalidShape(format!(
            "lrn expects a 4-d input and depth >= 1, got {input:?} / depth {depth}"
        ))),
    }
}

pub(crate) fn linear_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    match (input, weight) {
        (&[n, d], &[m, wd]) if wd == d && bias == [m] => Ok((n, d, m)),
        _ => Err(Error::InvalidShape(format!(
            "linear input {input:?} incompatible with weight {weight:?} / bias {bias:?}"
        ))),
    }
}

pub(crate) fn check_labels<T: Scalar>(scores: &[usize], labels: &[T]) -> Result<()> {
    if scores.len() != 1 || scores[0] != labels.len() || labels.is_empty() {
        return Err(Error::InvalidShape(format!(
            "hinge loss needs scores of shape [N] with N = {} labels, got {scores:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != T::one() && y != -T::one()) {
        return Err(Error::InvalidLabel(bad.as_f64()));
    }
    Ok(())
}

pub(crate) fn lrn_domain_error(index: usize) -> Error {
    Error::NumericDomain(format!(
        "lrn denominator k + alpha*sum(x^2) is not positive at element {index}"
    ))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(input.data(), kernel.data(), bias.data(), &g);
    Tensor::new([g.batch, g.filters, g.out_h, g.out_w], out)
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let g = pool_geometry(input.shape(), window, stride)?;
    let (out, _) = kernels::maxpool_forward(input.data(), &g);
    let s = input.shape();
    Tensor::new([s[0], s[1], g.out_h, g.out_w], out)
}

pub fn lrn<T: Scalar>(input: &Tensor<T>, params: &LrnParams<T>) -> Result<Tensor<T>> {
    let (c, plane) = lrn_layout(input.shape(), params.depth)?;
    let (out, _) = kernels::lrn_forward(input.data(), c, plane, params).map_err(lrn_domain_error)?;
    Tensor::new(input.shape(), out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::new(input.shape(), kernels::relu_forward(input.data()))
        .expect("relu preserves shape")
}

pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = linear_dims(input.shape(), weight.shape(), bias.shape())?;
    Tensor::new(
        [n, m],
        kernels::linear_forward(input.data(), weight.data(), bias.data(), n, d, m),
    )
}

/// Mean margin hinge loss `(1/N)·Σ max(0, 1 − yᵢ·sᵢ)` with labels in {+1, −1}.
pub fn hinge_loss<T: Scalar>(scores: &Tensor<T>, labels: &[T]) -> Result<Tensor<T>> {
    check_labels(scores.shape(), labels)?;
    Ok(Tensor::scalar(kernels::hinge_forward(scores.data(), labels)))
}

/// Row-wise softmax of a 2-d tensor.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, m] = input.shape() else {
        return Err(Error::InvalidShape(format!(
            "softmax expects [N, M], got {:?}",
            input.shape()
        )));
    };
    Tensor::new(input.shape(), kernels::softmax_forward(input.data(), m))
}
