//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node itself. Parameters are borrowed, not copied: the
//! tape holds `&'a` views of them, and [`Tape::backward`] returns a
//! [`Gradients`] table that is applied to the parameters once the tape has
//! been dropped.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, LrnParams, PoolGeometry};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeometry },
    MaxPool { input: usize, argmax: Vec<usize> },
    Lrn { input: usize, params: LrnParams<T>, denom: Vec<T> },
    Relu { input: usize },
    Linear { input: usize, weight: usize, bias: usize, dims: (usize, usize, usize) },
    Reshape { input: usize },
    Hinge { scores: usize, labels: Vec<T> },
    Softmax { input: usize },
    Sum { input: usize },
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer record of one forward pass.
pub struct Tape<'a, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a borrowed tensor. Gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records an owned tensor, e.g. a batch of input images.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, needs_grad)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.nodes[self.index(v)?].shape)
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let node = &self.nodes[self.index(v)?];
        Tensor::new(node.shape.clone(), node.value.to_vec())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (i, k, b) = (self.index(input)?, self.index(kernel)?, self.index(bias)?);
        let geom = ops::conv_geometry(
            &self.nodes[i].shape,
            &self.nodes[k].shape,
            &self.nodes[b].shape,
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&self.nodes[i].value, &self.nodes[k].value, &self.nodes[b].value, &geom);
        let needs = self.nodes[i].needs_grad || self.nodes[k].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(
            vec![geom.batch, geom.filters, geom.out_h, geom.out_w],
            Cow::Owned(out),
            Op::Conv2d { input: i, kernel: k, bias: b, geom },
            needs,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let i = self.index(input)?;
        let geom: PoolGeometry = ops::pool_geometry(&self.nodes[i].shape, window, stride)?;
        let (out, argmax) = kernels::maxpool_forward(&self.nodes[i].value, &geom);
        let s = &self.nodes[i].shape;
        let shape = vec![s[0], s[1], geom.out_h, geom.out_w];
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(shape, Cow::Owned(out), Op::MaxPool { input: i, argmax }, needs))
    }

    pub fn lrn(&mut self, input: Var, params: LrnParams<T>) -> Result<Var> {
        let i = self.index(input)?;
        let (c, plane) = ops::lrn_layout(&self.nodes[i].shape, params.depth)?;
        let (out, denom) =
            kernels::lrn_forward(&self.nodes[i].value, c, plane, &params).map_err(ops::lrn_domain_error)?;
        let shape = self.nodes[i].shape.clone();
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(shape, Cow::Owned(out), Op::Lrn { input: i, params, denom }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = kernels::relu_forward(&self.nodes[i].value);
        let shape = self.nodes[i].shape.clone();
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(shape, Cow::Owned(out), Op::Relu { input: i }, needs))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let dims = ops::linear_dims(&self.nodes[i].shape, &self.nodes[w].shape, &self.nodes[b].shape)?;
        let (n, d, m) = dims;
        let out = kernels::linear_forward(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value, n, d, m);
        let needs = self.nodes[i].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(vec![n, m], Cow::Owned(out), Op::Linear { input: i, weight: w, bias: b, dims }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.index(input)?;
        if numel(shape) != self.nodes[i].value.len() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[i].shape
            )));
        }
        // Borrowed leaves stay borrowed; computed values are copied.
        let value = match &self.nodes[i].value {
            Cow::Borrowed(s) => Cow::Borrowed(*s),
            Cow::Owned(v) => Cow::Owned(v.clone()),
        };
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input: i }, needs))
    }

    /// Mean margin hinge loss over a `[N]` score vector; labels must be ±1.
    pub fn hinge_loss(&mut self, scores: Var, labels: &[T]) -> Result<Var> {
        let s = self.index(scores)?;
        ops::check_labels(&self.nodes[s].shape, labels)?;
        let loss = kernels::hinge_forward(&self.nodes[s].value, labels);
        let needs = self.nodes[s].needs_grad;
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![loss]),
            Op::Hinge { scores: s, labels: labels.to_vec() },
            needs,
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let &[_, m] = self.nodes[i].shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "softmax expects [N, M], got {:?}",
                self.nodes[i].shape
            )));
        };
        let out = kernels::softmax_forward(&self.nodes[i].value, m);
        let shape = self.nodes[i].shape.clone();
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { input: i }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let total: T = self.nodes[i].value.iter().copied().sum();
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(Vec::new(), Cow::Owned(vec![total]), Op::Sum { input: i }, needs))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Each node is visited once, in reverse recording order. Only nodes
    /// that transitively depend on a grad-requiring leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        fn add<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
            match slot {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let needs = |j: usize| self.nodes[j].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv2d { input, kernel, bias, geom } => {
                    let g = kernels::conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*kernel].value,
                        &gout,
                        geom,
                        needs(*input),
                    );
                    if let Some(gi) = g.input {
                        add(&mut grads[*input], gi);
                    }
                    if needs(*kernel) {
                        add(&mut grads[*kernel], g.kernel);
                    }
                    if needs(*bias) {
                        add(&mut grads[*bias], g.bias);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let len = self.nodes[*input].value.len();
                    add(&mut grads[*input], kernels::maxpool_backward(&gout, argmax, len));
                }
                Op::Lrn { input, params, denom } => {
                    let (c, plane) = ops::lrn_layout(&self.nodes[*input].shape, params.depth)?;
                    let gi = kernels::lrn_backward(&self.nodes[*input].value, denom, &gout, c, plane, params);
                    add(&mut grads[*input], gi);
                }
                Op::Relu { input } => {
                    add(&mut grads[*input], kernels::relu_backward(&self.nodes[*input].value, &gout));
                }
                Op::Linear { input, weight, bias, dims: (n, d, m) } => {
                    let g = kernels::linear_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        &gout,
                        *n,
                        *d,
                        *m,
                        needs(*input),
                    );
                    if let Some(gi) = g.input {
                        add(&mut grads[*input], gi);
                    }
                    if needs(*weight) {
                        add(&mut grads[*weight], g.weight);
                    }
                    if needs(*bias) {
                        add(&mut grads[*bias], g.bias);
                    }
                }
                Op::Reshape { input } => add(&mut grads[*input], gout),
                Op::Hinge { scores, labels } => {
                    let gs = kernels::hinge_backward(&self.nodes[*scores].value, labels, gout[0]);
                    add(&mut grads[*scores], gs);
                }
                Op::Softmax { input } => {
                    let m = *node.shape.last().expect("softmax output is 2-d");
                    add(&mut grads[*input], kernels::softmax_backward(&node.value, &gout, m));
                }
                Op::Sum { input } => {
                    let len = self.nodes[*input].value.len();
                    add(&mut grads[*input], vec![gout[0]; len]);
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Gradients of one scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Result<Option<&[T]>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to the differentiated tape",
                v.index
            )));
        }
        Ok(self.grads[v.index].as_deref())
    }

    /// Adds the gradient for `v` into `tensor`'s grad buffer.
    ///
    /// A leaf that received no gradient contributes zeros, so the buffer is
    /// always populated afterwards.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        if !tensor.requires_grad() {
            return Err(Error::Graph(
                "cannot accumulate into a tensor that does not require grad".into(),
            ));
        }
        match self.get(v)? {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn hinge_grad(s: f64, y: f64) -> f64 {
        let scores = t(&[1], &[s]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&scores);
        let loss = tape.hinge_loss(v, &[y]).unwrap();
        let g = tape.backward(loss).unwrap();
        g.get(v).unwrap().unwrap()[0]
    }

    #[test]
    fn hinge_gradient_examples() {
        assert_eq!(hinge_grad(0.5, 1.0), -1.0);
        assert_eq!(hinge_grad(2.0, 1.0), 0.0);
        assert_eq!(hinge_grad(-0.5, -1.0), 1.0);
    }

    #[test]
    fn linear_weight_gradient_is_input_row() {
        let x = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let w = t(&[1, 3], &[0.1, 0.2, 0.3]).with_grad();
        let b = t(&[1], &[0.0]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.linear(xv, wv, bv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(wv).unwrap().unwrap(), x.data());
        assert!(g.get(xv).unwrap().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(tape.backward(v).unwrap_err(), Error::InvalidShape(_)));
    }

    #[test]
    fn foreign_variable_is_graph_error() {
        let x = t(&[1], &[1.0]).with_grad();
        let mut a = Tape::new();
        let mut b = Tape::<f64>::new();
        let va = a.leaf(&x);
        let vb = b.leaf(&x);
        let loss = a.sum(va).unwrap();
        assert!(matches!(b.backward(loss).unwrap_err(), Error::Graph(_)));
        let g = a.backward(loss).unwrap();
        assert!(matches!(g.get(vb).unwrap_err(), Error::Graph(_)));
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let mut w = t(&[1], &[3.0]).with_grad();
        for _ in 0..2 {
            let g = {
                let mut tape = Tape::new();
                let v = tape.leaf(&w);
                let loss = tape.sum(v).unwrap();
                (v, tape.backward(loss).unwrap())
            };
            g.1.accumulate_into(g.0, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[2.0]);
    }
}
