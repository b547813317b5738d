use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Degradations, GroundTruth, SynthSpec};
use crate::error::{Error, Result};
use crate::preprocess::RawImage;

/// Field-of-view radius as a fraction of the image side.
pub const FOV_RADIUS_FRACTION: f64 = 0.47;

/// Largest allowed gap between requested and rendered visibility.
const VISIBILITY_TOLERANCE: f64 = 0.05;

const FUNDUS_RGB: [f64; 3] = [205.0, 88.0, 42.0];
const DISC_RGB: [f64; 3] = [250.0, 215.0, 140.0];
const HAZE_RGB: [f64; 3] = [215.0, 155.0, 115.0];

struct Canvas {
    side: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn idx(&self, x: usize, y: usize) -> usize {
        3 * (y * self.side + x)
    }
}

/// Smooth value noise in [0, 1): two octaves of bilinearly interpolated
/// lattice values with smoothstep easing.
fn value_noise(side: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for (octave, weight) in [(1.0, 1.0), (0.5, 0.5)] {
        let c = (cell * octave).max(2.0);
        let g = (side as f64 / c).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        let ease = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..side {
            let fy = y as f64 / c;
            let (gy, ty) = (fy.floor() as usize, ease(fy.fract()));
            for x in 0..side {
                let fx = x as f64 / c;
                let (gx, tx) = (fx.floor() as usize, ease(fx.fract()));
                let v = |i: usize, j: usize| lattice[j * g + i];
                let top = v(gx, gy) * (1.0 - tx) + v(gx + 1, gy) * tx;
                let bot = v(gx, gy + 1) * (1.0 - tx) + v(gx + 1, gy + 1) * tx;
                out[y * side + x] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let max = 1.5 + f64::EPSILON;
    out.iter_mut().for_each(|v| *v /= max);
    out
}

/// Marks the `k` members of `pixels` with the highest noise value (ties by
/// index) as visible.
fn mark_top(pixels: &[usize], noise: &[f64], k: usize, visible: &mut [bool]) {
    let mut order = pixels.to_vec();
    order.sort_by(|&a, &b| noise[b].total_cmp(&noise[a]).then(a.cmp(&b)));
    for &p in &order[..k.min(order.len())] {
        visible[p] = true;
    }
}

/// Stamps an anti-aliased polyline of the given half-width into `map`.
fn stamp_polyline(map: &mut [f64], side: usize, pts: &[(f64, f64)], half_width: &[f64], strength: f64) {
    for (seg, hw) in pts.windows(2).zip(half_width) {
        let (a, b) = (seg[0], seg[1]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let steps = (len / 0.5).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (px, py) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            let r = hw + 1.0;
            let x0 = (px - r).floor().max(0.0) as usize;
            let y0 = (py - r).floor().max(0.0) as usize;
            let x1 = ((px + r).ceil() as usize).min(side - 1);
            let y1 = ((py + r).ceil() as usize).min(side - 1);
            if px + r < 0.0 || py + r < 0.0 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = (x as f64 + 0.5 - px).hypot(y as f64 + 0.5 - py);
                    let v = strength * (1.0 - (d - hw)).clamp(0.0, 1.0);
                    let m = &mut map[y * side + x];
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
    }
}

/// Main vessels: curved polylines radiating from the disc, tapering outward.
fn vessel_map(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.side;
    let dd = spec.disc_diameter_px;
    let mut map = vec![0.0; side * side];
    let n = rng.random_range(10..=14);
    for i in 0..n {
        let theta0 = std::f64::consts::TAU * (i as f64 + rng.random::<f64>()) / n as f64;
        let length = spec.fov_radius() * rng.random_range(0.9..1.7);
        let bend = rng.random_range(-0.9..0.9);
        let wiggle = rng.random_range(2.0..5.0);
        let w0 = dd * rng.random_range(0.05..0.08);
        let steps = (length / 3.0).ceil() as usize;
        let mut pts = Vec::with_capacity(steps + 1);
        let mut widths = Vec::with_capacity(steps);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let theta = theta0 + bend * t + 0.12 * (wiggle * t * std::f64::consts::TAU).sin();
            let r = dd * 0.3 + t * length;
            pts.push((spec.disc_center.0 + r * theta.cos(), spec.disc_center.1 + r * theta.sin()));
            if s < steps {
                widths.push(w0 * (1.0 - 0.6 * t) + 0.4);
            }
        }
        stamp_polyline(&mut map, side, &pts, &widths, 1.0);
    }
    map
}

/// Thin chords across the disc surface.
fn fine_vessel_map(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.side;
    let r = spec.disc_diameter_px / 2.0;
    let mut map = vec![0.0; side * side];
    for _ in 0..7 {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let b = a + rng.random_range(1.8..4.4);
        let (cx, cy) = spec.disc_center;
        let pts = [
            (cx + 0.9 * r * a.cos(), cy + 0.9 * r * a.sin()),
            (cx + 0.2 * r * (a + b).cos(), cy + 0.2 * r * (a + b).sin()),
            (cx + 0.9 * r * b.cos(), cy + 0.9 * r * b.sin()),
        ];
        stamp_polyline(&mut map, side, &pts, &[0.35, 0.35], 0.8);
    }
    map
}

/// Renders the undegraded image and its ground truth.
pub(super) fn render_clean(spec: &SynthSpec, seed: u64) -> Result<(RawImage, GroundTruth)> {
    spec.validate()?;
    let side = spec.side;
    let dd = spec.disc_diameter_px;
    let (cx, cy) = spec.center();
    let radius = spec.fov_radius();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let inside = |x: usize, y: usize| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= radius;
    let near_fovea = |x: usize, y: usize| {
        (x as f64 + 0.5 - spec.fovea_center.0).hypot(y as f64 + 0.5 - spec.fovea_center.1) <= dd
    };

    // Visibility mask: the smoothest-noise peaks are where vessels resolve.
    let noise = value_noise(side, dd * 0.9, &mut rng);
    let mut near = Vec::new();
    let mut rest = Vec::new();
    for y in 0..side {
        for x in 0..side {
            if inside(x, y) {
                if near_fovea(x, y) {
                    near.push(y * side + x);
                } else {
                    rest.push(y * side + x);
                }
            }
        }
    }
    let fov_pixels = near.len() + rest.len();
    if fov_pixels == 0 || near.is_empty() {
        return Err(Error::Generation("fovea region lies outside the field of view".into()));
    }
    let k_near = (spec.vessel_visibility_near_fovea * near.len() as f64).round() as usize;
    let k_total = (spec.vessel_visibility_global * fov_pixels as f64).round() as usize;
    let k_rest = k_total.saturating_sub(k_near).min(rest.len());
    let mut visible = vec![false; side * side];
    mark_top(&near, &noise, k_near, &mut visible);
    mark_top(&rest, &noise, k_rest, &mut visible);
    let realized_near = k_near as f64 / near.len() as f64;
    let realized_global = (k_near + k_rest) as f64 / fov_pixels as f64;
    for (what, want, got) in [
        ("near-fovea", spec.vessel_visibility_near_fovea, realized_near),
        ("global", spec.vessel_visibility_global, realized_global),
    ] {
        if (want - got).abs() > VISIBILITY_TOLERANCE {
            return Err(Error::Generation(format!(
                "{what} visibility {want} rendered as {got:.3}; outside tolerance {VISIBILITY_TOLERANCE}"
            )));
        }
    }

    let vessels = vessel_map(spec, &mut rng);
    let fine = fine_vessel_map(spec, &mut rng);
    let texture = value_noise(side, dd * 0.25, &mut rng);
    let fovea_sigma = 0.35 * dd;

    let mut canvas = Canvas {
        side,
        rgb: vec![0.0; 3 * side * side],
    };
    for y in 0..side {
        for x in 0..side {
            if !inside(x, y) {
                continue;
            }
            let p = y * side + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rr = ((px - cx).hypot(py - cy) / radius).powi(2);
            let shade = (1.0 - 0.35 * rr) * (0.96 + 0.08 * texture[p]);
            let mut c = FUNDUS_RGB.map(|v| v * shade);

            let fd2 = (px - spec.fovea_center.0).powi(2) + (py - spec.fovea_center.1).powi(2);
            let fovea = (-fd2 / (2.0 * fovea_sigma * fovea_sigma)).exp();
            c.iter_mut().for_each(|v| *v *= 1.0 - 0.4 * fovea);

            let dd_dist = (px - spec.disc_center.0).hypot(py - spec.disc_center.1);
            let disc = (1.0 - (dd_dist - dd / 2.0) / 1.5).clamp(0.0, 1.0);
            for (v, d) in c.iter_mut().zip(DISC_RGB) {
                *v += disc * (d - *v);
            }
            if spec.fine_vessels_on_disc && disc > 0.0 {
                c.iter_mut().for_each(|v| *v *= 1.0 - 0.45 * fine[p] * disc);
            }

            if visible[p] {
                let f = 1.0 - 0.55 * vessels[p];
                c[0] *= f;
                c[1] *= f * f;
                c[2] *= f * f;
            } else {
                for (v, h) in c.iter_mut().zip(HAZE_RGB) {
                    *v += 0.4 * (h - *v);
                }
            }
            let i = canvas.idx(x, y);
            canvas.rgb[i..i + 3].copy_from_slice(&c);
        }
    }
    let pixels = canvas.rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let image = RawImage::new(side, side, pixels)?;

    let grade = super::rule_grade(
        &super::RuleInput {
            vessel_visibility_global: Some(realized_global),
            vessel_visibility_near_fovea: Some(realized_near),
            ..spec.rule_input()
        },
        spec.field_type,
    )?;
    let truth = GroundTruth {
        spec: spec.clone(),
        fovea_center_dd: spec.center_distance_dd(spec.fovea_center),
        fovea_edge_dd: spec.edge_distance_dd(spec.fovea_center),
        disc_center_dd: spec.center_distance_dd(spec.disc_center),
        disc_edge_dd: spec.edge_distance_dd(spec.disc_center),
        realized_visibility_global: realized_global,
        realized_visibility_near_fovea: realized_near,
        grade,
        class: grade.class(),
    };
    Ok((image, truth))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(buf: &mut [f64], w: usize, h: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * buf[3 * (y * w + xx) + c];
                }
                tmp[3 * (y * w + x) + c] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[3 * (yy * w + x) + c];
                }
                buf[3 * (y * w + x) + c] = acc;
            }
        }
    }
}

/// Applies blur, then brightness, then contrast. Identity stages are skipped,
/// so an all-identity setting returns the input unchanged.
///
/// Contrast scales each channel about its mean over foreground pixels
/// (`max(R, G, B) > 20`) and leaves the background untouched.
pub fn degrade(image: &RawImage, d: &Degradations) -> Result<RawImage> {
    if d.is_identity() {
        return Ok(image.clone());
    }
    let (w, h) = (image.width(), image.height());
    let mut buf: Vec<f64> = image.pixels().iter().map(|&v| v as f64).collect();
    if d.blur_sigma > 0.0 {
        blur(&mut buf, w, h, d.blur_sigma);
    }
    if d.brightness_scale != 1.0 {
        buf.iter_mut().for_each(|v| *v *= d.brightness_scale);
    }
    if d.contrast_scale != 1.0 {
        let fg: Vec<bool> = buf
            .chunks_exact(3)
            .map(|p| p[0].max(p[1]).max(p[2]) > crate::preprocess::DEFAULT_BRIGHTNESS_THRESHOLD as f64)
            .collect();
        let n = fg.iter().filter(|&&f| f).count().max(1) as f64;
        let mut mean = [0.0; 3];
        for (p, _) in buf.chunks_exact(3).zip(&fg).filter(|(_, &f)| f) {
            for c in 0..3 {
                mean[c] += p[c] / n;
            }
        }
        for (p, _) in buf.chunks_exact_mut(3).zip(&fg).filter(|(_, &f)| f) {
            for c in 0..3 {
                p[c] = mean[c] + d.contrast_scale * (p[c] - mean[c]);
            }
        }
    }
    let pixels = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RawImage::new(w, h, pixels)
}

/// Renders `spec` and applies its degradations. Deterministic in
/// `(spec, seed)`.
pub fn render(spec: &SynthSpec, seed: u64) -> Result<(RawImage, GroundTruth)> {
    let (clean, truth) = render_clean(spec, seed)?;
    Ok((degrade(&clean, &spec.degradations)?, truth))
}

#[cfg(test)]
mod tests {
    use super::super::{FieldType, QualityGrade};
    use super::*;
    use crate::preprocess::detect_fov;

    fn spec() -> SynthSpec {
        SynthSpec {
            side: 128,
            field_type: FieldType::MaculaCentered,
            disc_diameter_px: 128.0 / 7.5,
            disc_center: (64.0 - 2.5 * 128.0 / 7.5, 60.0),
            fovea_center: (66.0, 64.0),
            vessel_visibility_global: 0.95,
            vessel_visibility_near_fovea: 0.97,
            fine_vessels_on_disc: true,
            degradations: Degradations::default(),
        }
    }

    #[test]
    fn identity_degradation_is_exact() {
        let (clean, _) = render_clean(&spec(), 3).unwrap();
        let (full, _) = render(&spec(), 3).unwrap();
        assert_eq!(clean, full);
        assert_eq!(degrade(&clean, &Degradations::default()).unwrap(), clean);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = render(&spec(), 9).unwrap();
        let b = render(&spec(), 9).unwrap();
        let c = render(&spec(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn truth_geometry_matches_pixels() {
        let s = spec();
        let (img, truth) = render(&s, 1).unwrap();
        let dd = s.disc_diameter_px;
        let (cx, cy) = (64.0, 64.0);
        assert_eq!(truth.fovea_center_dd, (66.0f64 - cx).hypot(64.0 - cy) / dd);
        assert_eq!(truth.fovea_edge_dd, (0.47 * 128.0 - 2.0) / dd);
        assert_eq!(truth.grade, QualityGrade::Good);
        assert!((truth.realized_visibility_global - 0.95).abs() <= 0.05);
        // Field of view spans roughly the rendered circle.
        let b = detect_fov(&img, 20).unwrap();
        let r = 0.47 * 128.0;
        assert!((b.width() as f64 - 2.0 * r).abs() <= 2.0, "{b:?}");
    }

    #[test]
    fn degradations_change_pixels() {
        let mut s = spec();
        s.degradations = Degradations {
            blur_sigma: 2.0,
            brightness_scale: 0.6,
            contrast_scale: 0.7,
        };
        let (clean, _) = render_clean(&s, 4).unwrap();
        let (img, _) = render(&s, 4).unwrap();
        let mean = |i: &RawImage| i.pixels().iter().map(|&v| v as f64).sum::<f64>() / i.pixels().len() as f64;
        assert!(mean(&img) < 0.8 * mean(&clean));
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let mut s = spec();
        s.vessel_visibility_global = 1.2;
        assert!(matches!(render(&s, 1), Err(Error::Config(_))));
        let mut s = spec();
        s.fovea_center = (500.0, 1.0);
        assert!(matches!(render(&s, 1), Err(Error::Config(_))));
    }

    #[test]
    fn unreachable_visibility_is_generation_error() {
        let mut s = spec();
        s.vessel_visibility_near_fovea = 1.0;
        s.vessel_visibility_global = 0.0;
        assert!(matches!(render(&s, 1), Err(Error::Generation(_))));
    }
}
