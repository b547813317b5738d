//! Forward and backward kernels on flat row-major buffers.
//!
//! These are shape-checked by the callers in [`crate::ops`] and
//! [`crate::autodiff`]; here every slice length is trusted.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        out.chunks_mut(n).enumerate().for_each(row);
    } else {
        out.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n < PAR_THRESHOLD {
        out.chunks_mut(n).enumerate().for_each(row);
    } else {
        out.par_chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Resolved dimensions of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub(crate) fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub(crate) fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub(crate) fn out_image(&self) -> usize {
        self.filters * self.out_plane()
    }
}

/// Unrolls one image into `[C·kh·kw, out_h·out_w]` patch columns.
fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &chan[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *d = if x < 0 || x >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulates column gradients into the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.in_w as isize {
                            chan[y as usize * g.in_w + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    for (img, out_img) in input
        .chunks(g.in_image())
        .zip(out.chunks_mut(g.out_image()))
    {
        im2col(img, g, &mut cols);
        for (k, row) in out_img.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[k]);
        }
        gemm_nn(kernel, &cols, out_img, g.filters, g.patch_len(), plane);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut grad_kernel = vec![T::zero(); kernel.len()];
    let mut grad_bias = vec![T::zero(); g.filters];
    let mut grad_input = need_input.then(|| vec![T::zero(); input.len()]);
    let kernel_t = need_input.then(|| transpose(kernel, g.filters, patch));
    let mut cols = vec![T::zero(); patch * plane];
    let mut grad_cols = vec![T::zero(); patch * plane];
    for (b, (img, gout)) in input
        .chunks(g.in_image())
        .zip(grad_out.chunks(g.out_image()))
        .enumerate()
    {
        im2col(img, g, &mut cols);
        gemm_nt(gout, &cols, &mut grad_kernel, g.filters, plane, patch);
        for (k, row) in gout.chunks(plane).enumerate() {
            grad_bias[k] += row.iter().copied().sum::<T>();
        }
        if let (Some(gin), Some(kt)) = (grad_input.as_mut(), kernel_t.as_ref()) {
            grad_cols.iter_mut().for_each(|v| *v = T::zero());
            gemm_nn(kt, gout, &mut grad_cols, patch, g.filters, plane);
            col2im(
                &grad_cols,
                g,
                &mut gin[b * g.in_image()..(b + 1) * g.in_image()],
            );
        }
    }
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// Resolved dimensions of one max-pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns the pooled values and, for each, the flat input index of its
/// maximum (first occurrence in row-major order on ties).
pub(crate) fn maxpool_forward<T: Scalar>(input: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let n_out = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + oy * g.stride * g.in_w + ox * g.stride;
                let mut best = input[best_idx];
                for wy in 0..g.window {
                    let row = base + (oy * g.stride + wy) * g.in_w + ox * g.stride;
                    for wx in 0..g.window {
                        let v = input[row + wx];
                        if v > best {
                            best = v;
                            best_idx = row + wx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], in_len: usize) -> Vec<T> {
    let mut gin = vec![T::zero(); in_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        gin[idx] += g;
    }
    gin
}

/// Cross-channel local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams<T> {
    pub depth: usize,
    pub k: T,
    pub alpha: T,
    pub beta: T,
}

#[inline]
fn lrn_window(c: usize, depth: usize, channels: usize) -> std::ops::Range<usize> {
    let pre = (depth - 1) / 2;
    let lo = c.saturating_sub(pre);
    let hi = (c + depth - pre).min(channels);
    lo..hi
}

/// Returns the output and the per-element denominator base
/// `k + alpha·Σ x²`. Fails (returns `Err(index)`) on a non-positive base.
pub(crate) fn lrn_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    plane: usize,
    p: &LrnParams<T>,
) -> Result<(Vec<T>, Vec<T>), usize> {
    let mut out = vec![T::zero(); input.len()];
    let mut denom = vec![T::zero(); input.len()];
    for (b, img) in input.chunks(channels * plane).enumerate() {
        let base = b * channels * plane;
        for c in 0..channels {
            let win = lrn_window(c, p.depth, channels);
            for s in 0..plane {
                let mut sq = T::zero();
                for j in win.clone() {
                    let v = img[j * plane + s];
                    sq += v * v;
                }
                let d = p.k + p.alpha * sq;
                let i = c * plane + s;
                if !(d > T::zero()) {
                    return Err(base + i);
                }
                denom[base + i] = d;
                out[base + i] = img[i] * d.powf(-p.beta);
            }
        }
    }
    Ok((out, denom))
}

pub(crate) fn lrn_backward<T: Scalar>(
    input: &[T],
    denom: &[T],
    grad_out: &[T],
    channels: usize,
    plane: usize,
    p: &LrnParams<T>,
) -> Vec<T> {
    let mut gin = vec![T::zero(); input.len()];
    let two_ab = T::lit(2.0) * p.alpha * p.beta;
    let block = channels * plane;
    for b in 0..input.len() / block {
        let base = b * block;
        for c in 0..channels {
            for s in 0..plane {
                let i = base + c * plane + s;
                let d = denom[i];
                gin[i] += grad_out[i] * d.powf(-p.beta);
                // x_i depends on every x_j inside its window through d_i.
                let coef = two_ab * grad_out[i] * input[i] * d.powf(-p.beta - T::one());
                for j in lrn_window(c, p.depth, channels) {
                    let jj = base + j * plane + s;
                    gin[jj] -= coef * input[jj];
                }
            }
        }
    }
    gin
}

pub(crate) fn relu_forward<T: Scalar>(input: &[T]) -> Vec<T> {
    input
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

pub(crate) fn relu_backward<T: Scalar>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// `out[n,m] = x[n,d] · w[m,d]ᵀ + b[m]`
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    d: usize,
    m: usize,
) -> Vec<T> {
    let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    gemm_nt(x, w, &mut out, n, d, m);
    out
}

pub(crate) struct LinearGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    n: usize,
    d: usize,
    m: usize,
    need_input: bool,
) -> LinearGrads<T> {
    let input = need_input.then(|| {
        let mut gx = vec![T::zero(); n * d];
        gemm_nn(grad_out, w, &mut gx, n, m, d);
        gx
    });
    let gout_t = transpose(grad_out, n, m);
    let mut weight = vec![T::zero(); m * d];
    gemm_nn(&gout_t, x, &mut weight, m, n, d);
    let mut bias = vec![T::zero(); m];
    for row in grad_out.chunks(m) {
        for (bj, &g) in bias.iter_mut().zip(row) {
            *bj += g;
        }
    }
    LinearGrads {
        input,
        weight,
        bias,
    }
}

/// Mean of `max(0, 1 − y·s)`.
pub(crate) fn hinge_forward<T: Scalar>(scores: &[T], labels: &[T]) -> T {
    let n = T::lit(scores.len() as f64);
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| (T::one() - y * s).max(T::zero()))
        .sum::<T>()
        / n
}

pub(crate) fn hinge_backward<T: Scalar>(scores: &[T], labels: &[T], grad_out: T) -> Vec<T> {
    let n = T::lit(scores.len() as f64);
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            if T::one() - y * s > T::zero() {
                -y / n * grad_out
            } else {
                T::zero()
            }
        })
        .collect()
}

pub(crate) fn softmax_forward<T: Scalar>(input: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(input.len());
    for row in input.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(output: &[T], grad_out: &[T], cols: usize) -> Vec<T> {
    let mut gin = Vec::with_capacity(output.len());
    for (y, g) in output.chunks(cols).zip(grad_out.chunks(cols)) {
        let inner = dot(y, g);
        gin.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - inner)));
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 19);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        let bt = transpose(&b, k, n);
        let mut out_nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut out_nt, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
                assert!((out_nt[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lrn_window_is_clipped_and_centered() {
        assert_eq!(lrn_window(0, 5, 8), 0..3);
        assert_eq!(lrn_window(4, 5, 8), 2..7);
        assert_eq!(lrn_window(7, 5, 8), 5..8);
        assert_eq!(lrn_window(0, 1, 1), 0..1);
    }
}
