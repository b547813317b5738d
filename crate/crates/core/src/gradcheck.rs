//! Central finite-difference checks of tape gradients.
//!
//! Non-scalar outputs are reduced to `L = Σ rᵢ·outᵢ` with fixed pseudo-random
//! weights `r`, so every output element contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error `|a − f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over every checked element.
    pub max_relative_error: f64,
    /// `(input index, element index, analytic, numeric)` at the maximum.
    pub worst: (usize, usize, f64, f64),
    pub elements: usize,
}

fn projected<'a>(tape: &mut Tape<'a, f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.shape(out)?.iter().product();
    if n != weights.len() {
        return Err(Error::InvalidShape("projection width changed between evaluations".into()));
    }
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.input(Tensor::new([1, n], weights.to_vec())?);
    let b = tape.input(Tensor::zeros([1]));
    tape.linear(flat, w, b)
}

/// Compares the tape's gradient of `f` with respect to every element of
/// every input against `(L(x + h) − L(x − h)) / 2h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, step: f64, floor: f64, seed: u64) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.shape(out)?.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = projected(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&leaves)
        .map(|(&v, t)| Ok(grads.get(v)?.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])))
        .collect::<Result<_>>()?;

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let l = projected(&mut tape, out, &weights)?;
        Ok(tape.value(l)?[0])
    };

    let mut worst = (0, 0, 0.0, 0.0);
    let mut max_err = 0.0f64;
    let mut elements = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[i][j], numeric, floor);
            elements += 1;
            if err > max_err || elements == 1 {
                max_err = err;
                worst = (i, j, analytic[i][j], numeric);
            }
        }
    }
    Ok(GradCheck {
        max_relative_error: max_err,
        worst,
        elements,
    })
}

/// Operators covered by [`random_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    MaxPool2d,
    Lrn,
    Relu,
    Linear,
    HingeLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::Lrn,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::HingeLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Lrn => "lrn",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::HingeLoss => "hinge_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub op: OpKind,
    pub cases: usize,
    pub max_relative_error: f64,
    /// Description of the case with the largest error.
    pub worst_case: String,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from `kink`, so a finite
/// difference never straddles a non-differentiable point.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(-1.0..1.0);
        if (v - kink).abs() >= gap {
            break v;
        }
    })
}

/// Runs `cases` randomly sized instances of `op` through [`check_gradients`].
/// Inputs stay clear of kinks (ReLU at 0, pooling ties, the hinge margin).
pub fn random_suite(op: OpKind, cases: usize, step: f64, floor: f64, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = SuiteResult {
        op,
        cases,
        max_relative_error: 0.0,
        worst_case: String::new(),
    };
    for case in 0..cases {
        let case_seed = rng.random();
        let (desc, check) = match op {
            OpKind::Conv2d => {
                let n = rng.random_range(1..=2);
                let c = rng.random_range(1..=3);
                let h = rng.random_range(3..=6);
                let w = rng.random_range(3..=6);
                let f = rng.random_range(1..=3);
                let k = rng.random_range(1..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let inputs = [
                    uniform(&mut rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(&mut rng, &[f, c, k, k], -1.0, 1.0),
                    uniform(&mut rng, &[f], -0.5, 0.5),
                ];
                (
                    format!("input {n}x{c}x{h}x{w}, kernel {f}x{c}x{k}x{k}, stride {stride}, pad {pad}"),
                    check_gradients(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad), step, floor, case_seed)?,
                )
            }
            OpKind::MaxPool2d => {
                let n = rng.random_range(1..=2);
                let c = rng.random_range(1..=2);
                let h = rng.random_range(2..=6);
                let w = rng.random_range(2..=6);
                let window = rng.random_range(1..=h.min(w).min(3));
                let stride = rng.random_range(1..=2);
                // Distinct values spaced far apart relative to the step.
                let len = n * c * h * w;
                let mut order: Vec<usize> = (0..len).collect();
                for i in (1..len).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                let data = order
                    .iter()
                    .map(|&r| r as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01))
                    .collect();
                let inputs = [Tensor::new([n, c, h, w], data)?];
                (
                    format!("input {n}x{c}x{h}x{w}, window {window}, stride {stride}"),
                    check_gradients(&inputs, |t, v| t.maxpool2d(v[0], window, stride), step, floor, case_seed)?,
                )
            }
            OpKind::Lrn => {
                let c = rng.random_range(1..=7);
                let h = rng.random_range(1..=3);
                let w = rng.random_range(1..=3);
                let depth = [1, 3, 5][rng.random_range(0..3)];
                let params = crate::kernels::LrnParams {
                    depth,
                    k: rng.random_range(1.0..2.0),
                    alpha: rng.random_range(0.01..1.0),
                    beta: rng.random_range(0.5..1.0),
                };
                let inputs = [uniform(&mut rng, &[1, c, h, w], -2.0, 2.0)];
                (
                    format!("input 1x{c}x{h}x{w}, {params:?}"),
                    check_gradients(&inputs, |t, v| t.lrn(v[0], params), step, floor, case_seed)?,
                )
            }
            OpKind::Relu => {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=8)];
                let inputs = [away_from(&mut rng, &shape, 0.0, 1e-3)];
                (
                    format!("input {shape:?}"),
                    check_gradients(&inputs, |t, v| t.relu(v[0]), step, floor, case_seed)?,
                )
            }
            OpKind::Linear => {
                let n = rng.random_range(1..=3);
                let d = rng.random_range(1..=6);
                let m = rng.random_range(1..=5);
                let inputs = [
                    uniform(&mut rng, &[n, d], -1.0, 1.0),
                    uniform(&mut rng, &[m, d], -1.0, 1.0),
                    uniform(&mut rng, &[m], -1.0, 1.0),
                ];
                (
                    format!("input {n}x{d}, weight {m}x{d}"),
                    check_gradients(&inputs, |t, v| t.linear(v[0], v[1], v[2]), step, floor, case_seed)?,
                )
            }
            OpKind::HingeLoss => {
                let n = rng.random_range(1..=6);
                let labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
                // Keep y*s away from the margin at 1.
                let scores = Tensor::from_fn([n], |i| loop {
                    let s: f64 = rng.random_range(-3.0..3.0);
                    if (labels[i] * s - 1.0).abs() >= 1e-3 {
                        break s;
                    }
                });
                (
                    format!("{n} scores"),
                    check_gradients(&[scores], |t, v| t.hinge_loss(v[0], &labels), step, floor, case_seed)?,
                )
            }
        };
        if check.max_relative_error > worst.max_relative_error || case == 0 {
            worst.max_relative_error = check.max_relative_error;
            worst.worst_case = format!("{desc}: {:?}", check.worst);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_linear_chain_passes() {
        let x = Tensor::new([2, 3], vec![0.5, -0.7, 1.2, 0.3, 0.9, -1.1]).unwrap();
        let w = Tensor::new([2, 3], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]).unwrap();
        let b = Tensor::new([2], vec![0.05, -0.02]).unwrap();
        let r = check_gradients(
            &[x, w, b],
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                t.relu(h)
            },
            1e-6,
            1e-6,
            1,
        )
        .unwrap();
        assert_eq!(r.elements, 14);
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    #[test]
    fn every_op_passes_a_few_cases() {
        for op in OpKind::ALL {
            let r = random_suite(op, 5, 1e-6, 1e-6, 3).unwrap();
            assert!(r.max_relative_error <= 1e-4, "{r:?}");
        }
    }
}
