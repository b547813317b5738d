//! Fast kernels against direct loop implementations.

use fqc_core::ops::{conv2d, lrn, maxpool2d};
use fqc_core::{LrnParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(t: &Tensor<f64>, i: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

fn direct_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += at(x, [ni, ci, iy as usize, ix as usize]) * at(k, [fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (n, c, f) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let h = rng.random_range(4..=12);
        let w = rng.random_range(4..=12);
        let k = rng.random_range(1..=4.min(h).min(w));
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        let x = Tensor::from_fn([n, c, h, w], |_| rng.random_range(-1.0..1.0));
        let kern = Tensor::from_fn([f, c, k, k], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn([f], |_| rng.random_range(-1.0..1.0));
        let got = conv2d(&x, &kern, &b, stride, pad).unwrap();
        let want = direct_conv(&x, &kern, &b, stride, pad);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn conv_output_size_for_first_layer() {
    let x = Tensor::<f32>::zeros([1, 3, 256, 256]);
    let k = Tensor::<f32>::zeros([96, 3, 11, 11]);
    let b = Tensor::<f32>::zeros([96]);
    assert_eq!(conv2d(&x, &k, &b, 4, 0).unwrap().shape(), &[1, 96, 62, 62]);
}

#[test]
fn maxpool_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let h = rng.random_range(2..=9);
        let w = rng.random_range(2..=9);
        let win = rng.random_range(1..=3.min(h).min(w));
        let stride = rng.random_range(1..=3);
        let x = Tensor::from_fn([n, c, h, w], |_| rng.random_range(-1.0..1.0));
        let got = maxpool2d(&x, win, stride).unwrap();
        let (oh, ow) = ((h - win) / stride + 1, (w - win) / stride + 1);
        assert_eq!(got.shape(), &[n, c, oh, ow]);
        let mut want = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..win {
                            for dx in 0..win {
                                m = m.max(at(&x, [ni, ci, oy * stride + dy, ox * stride + dx]));
                            }
                        }
                        want.push(m);
                    }
                }
            }
        }
        assert_eq!(got.data(), &want[..]);
    }
}

#[test]
fn lrn_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let c = rng.random_range(1..=9);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let depth = [1, 3, 5, 7][rng.random_range(0..4)];
        let p = LrnParams {
            depth,
            k: rng.random_range(0.5..2.0),
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.25..1.0),
        };
        let x = Tensor::from_fn([1, c, h, w], |_| rng.random_range(-2.0..2.0));
        let got = lrn(&x, &p).unwrap();
        let half = (depth - 1) / 2;
        for ci in 0..c {
            let lo = ci.saturating_sub(half);
            let hi = (ci + half).min(c - 1);
            for y in 0..h {
                for xx in 0..w {
                    let sum: f64 = (lo..=hi).map(|j| at(&x, [0, j, y, xx]).powi(2)).sum();
                    let want = at(&x, [0, ci, y, xx]) / (p.k + p.alpha * sum).powf(p.beta);
                    let g = at(&got, [0, ci, y, xx]);
                    assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::from_fn([2, 3, 9, 9], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::from_fn([4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn([4], |_| rng.random_range(-1.0..1.0));
    let y64 = conv2d(&x, &k, &b, 2, 1).unwrap();
    let y32 = conv2d(&x.cast::<f32>(), &k.cast(), &b.cast(), 2, 1).unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
