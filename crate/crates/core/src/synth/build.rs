use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::render;
use super::{rule_grade, Degradations, FieldType, GroundTruth, SynthSpec};
use crate::dataset::{consensus, BinaryClass, Consensus, DatasetManifest, GradeRecord, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::preprocess::RawImage;

/// Grader ids used for synthetic grade records.
pub const SYNTH_GRADERS: [&str; 3] = ["synth-grader-1", "synth-grader-2", "synth-grader-3"];

/// Rejection-sampling budget per image.
const MAX_ATTEMPTS: usize = 500;

/// Closed interval sampled uniformly; `lo == hi` yields a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling ranges for one kind of image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Probability of a macula-centred field (otherwise disc-centred).
    pub macula_probability: f64,
    /// Offset of the field's anchor (fovea or disc) from image center, in DD.
    pub anchor_offset_dd: Range,
    pub visibility_global: Range,
    pub visibility_near_fovea: Range,
    pub fine_vessels_probability: f64,
    pub blur_sigma: Range,
    pub brightness_scale: Range,
    pub contrast_scale: Range,
}

/// Class-conditional sampling profiles used by the dataset builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub side: usize,
    pub accept: ClassProfile,
    pub reject: ClassProfile,
    /// Intermediate ranges for borderline images. Each variant additionally
    /// pins one quantity within ±5% of a rule threshold.
    pub ambiguous: ClassProfile,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self::with_side(256)
    }
}

impl SynthProfile {
    pub fn with_side(side: usize) -> Self {
        Self {
            side,
            accept: ClassProfile {
                macula_probability: 0.85,
                anchor_offset_dd: Range::new(0.0, 1.2),
                visibility_global: Range::new(0.7, 1.0),
                visibility_near_fovea: Range::new(0.93, 1.0),
                fine_vessels_probability: 1.0,
                blur_sigma: Range::new(0.0, 0.5),
                brightness_scale: Range::new(0.92, 1.08),
                contrast_scale: Range::new(0.92, 1.08),
            },
            reject: ClassProfile {
                macula_probability: 0.85,
                anchor_offset_dd: Range::new(0.0, 2.2),
                visibility_global: Range::new(0.05, 0.45),
                visibility_near_fovea: Range::new(0.05, 0.7),
                fine_vessels_probability: 0.2,
                blur_sigma: Range::new(2.0, 4.0),
                brightness_scale: Range::new(0.4, 0.7),
                contrast_scale: Range::new(0.5, 0.8),
            },
            ambiguous: ClassProfile {
                macula_probability: 1.0,
                anchor_offset_dd: Range::new(0.0, 1.2),
                visibility_global: Range::new(0.5, 0.75),
                visibility_near_fovea: Range::new(0.93, 1.0),
                fine_vessels_probability: 1.0,
                blur_sigma: Range::new(0.9, 1.6),
                brightness_scale: Range::new(0.72, 0.86),
                contrast_scale: Range::new(0.78, 0.9),
            },
        }
    }
}

/// Class counts sized like the paper's grading outcome: about 4% reject and
/// 2% ambiguous, the rest accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImbalancePreset {
    pub accept: usize,
    pub reject: usize,
    pub ambiguous: usize,
}

impl ImbalancePreset {
    pub fn for_total(total: usize) -> Self {
        let reject = (0.04 * total as f64).round() as usize;
        let ambiguous = (0.02 * total as f64).round() as usize;
        Self {
            accept: total - reject - ambiguous,
            reject,
            ambiguous,
        }
    }
}

fn geometry(profile: &ClassProfile, side: usize, rng: &mut ChaCha8Rng) -> (FieldType, f64, (f64, f64), (f64, f64)) {
    let s = side as f64;
    let dd = s / 7.5 * rng.random_range(0.95..1.05);
    let field = if rng.random_bool(profile.macula_probability.clamp(0.0, 1.0)) {
        FieldType::MaculaCentered
    } else {
        FieldType::DiscCentered
    };
    let offset = profile.anchor_offset_dd.sample(rng) * dd;
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let anchor = (s / 2.0 + offset * phi.cos(), s / 2.0 + offset * phi.sin());
    // Disc sits about 2.5 DD nasal to the fovea, slightly above; laterality
    // is random.
    let side_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let rel = (side_sign * 2.5 * dd, -0.2 * dd);
    let clamp = |p: (f64, f64)| (p.0.clamp(0.0, s - 1e-6), p.1.clamp(0.0, s - 1e-6));
    let (fovea, disc) = match field {
        FieldType::MaculaCentered => (anchor, clamp((anchor.0 + rel.0, anchor.1 + rel.1))),
        FieldType::DiscCentered => (clamp((anchor.0 - rel.0, anchor.1 - rel.1)), anchor),
    };
    (field, dd, fovea, disc)
}

/// Draws one spec from `profile`.
pub fn sample_spec(profile: &ClassProfile, side: usize, rng: &mut ChaCha8Rng) -> SynthSpec {
    let (field_type, dd, fovea, disc) = geometry(profile, side, rng);
    SynthSpec {
        side,
        field_type,
        disc_diameter_px: dd,
        disc_center: disc,
        fovea_center: fovea,
        vessel_visibility_global: profile.visibility_global.sample(rng).clamp(0.0, 1.0),
        vessel_visibility_near_fovea: profile.visibility_near_fovea.sample(rng).clamp(0.0, 1.0),
        fine_vessels_on_disc: rng.random_bool(profile.fine_vessels_probability.clamp(0.0, 1.0)),
        degradations: Degradations {
            blur_sigma: profile.blur_sigma.sample(rng).max(0.0),
            brightness_scale: profile.brightness_scale.sample(rng),
            contrast_scale: profile.contrast_scale.sample(rng),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RawImage,
    pub truth: GroundTruth,
}

/// Rejection-samples specs from the class profile until the rule oracle,
/// applied to the rendered ground truth, agrees with `class`.
pub fn generate_sample(profile: &SynthProfile, class: BinaryClass, seed: u64) -> Result<SynthSample> {
    let p = match class {
        BinaryClass::Accept => &profile.accept,
        BinaryClass::Reject => &profile.reject,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let spec = sample_spec(p, profile.side, &mut rng);
        if spec.validate().is_err() || rule_grade(&spec.rule_input(), spec.field_type)?.class() != class {
            continue;
        }
        let render_seed = rng.random();
        match render(&spec, render_seed) {
            Ok((image, truth)) if truth.class == class => return Ok(SynthSample { image, truth }),
            Ok(_) | Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no {class:?} image after {MAX_ATTEMPTS} attempts; the sampling ranges cannot produce this class"
    )))
}

/// A borderline variant: intermediate degradations, with one rule quantity
/// placed within ±5% of its threshold.
fn generate_ambiguous(profile: &SynthProfile, seed: u64) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut spec = sample_spec(&profile.ambiguous, profile.side, &mut rng);
        if rng.random_bool(0.5) {
            spec.vessel_visibility_near_fovea = rng.random_range(0.855..=0.945);
        } else {
            // Fovea 2 DD ± 5% from the field edge, along a random direction.
            let edge_dd = rng.random_range(1.9..=2.1);
            let r = spec.fov_radius() - edge_dd * spec.disc_diameter_px;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = spec.center();
            let moved = (cx + r * phi.cos(), cy + r * phi.sin());
            let delta = (moved.0 - spec.fovea_center.0, moved.1 - spec.fovea_center.1);
            spec.fovea_center = moved;
            let s = spec.side as f64;
            spec.disc_center = (
                (spec.disc_center.0 + delta.0).clamp(0.0, s - 1e-6),
                (spec.disc_center.1 + delta.1).clamp(0.0, s - 1e-6),
            );
        }
        if spec.validate().is_err() {
            continue;
        }
        let render_seed = rng.random();
        match render(&spec, render_seed) {
            Ok((image, truth)) => return Ok(SynthSample { image, truth }),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!("no ambiguous variant after {MAX_ATTEMPTS} attempts")))
}

fn grade_time(image_index: usize, grader: usize) -> DateTime<Utc> {
    let base = DateTime::parse_from_rfc3339("2017-01-01T00:00:00Z")
        .expect("valid literal")
        .with_timezone(&Utc);
    base + Duration::seconds((image_index * SYNTH_GRADERS.len() + grader) as i64)
}

fn grades_for(image_id: &str, index: usize, labels: [BinaryClass; 3]) -> Vec<GradeRecord> {
    SYNTH_GRADERS
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(g, (grader, label))| GradeRecord {
            image_id: image_id.to_string(),
            grader_id: grader.to_string(),
            label,
            timestamp: grade_time(index, g),
        })
        .collect()
}

fn write_sample(dir: &Path, id: &str, sample: &SynthSample) -> Result<String> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let rel = format!("images/{id}.ppm");
    sample.image.write_ppm(dir.join(&rel))?;
    let truth_path = images.join(format!("{id}.truth.json"));
    let json = serde_json::to_string_pretty(&sample.truth)?;
    std::fs::write(&truth_path, json + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok(rel)
}

fn entry_for(
    dir: &Path,
    id: String,
    index: usize,
    sample: &SynthSample,
    labels: [BinaryClass; 3],
) -> Result<ManifestEntry> {
    let path = write_sample(dir, &id, sample)?;
    let grades = grades_for(&id, index, labels);
    let consensus = consensus(&grades, SYNTH_GRADERS.len());
    Ok(ManifestEntry {
        image_id: id,
        path: path.into(),
        grades,
        consensus,
        split: Split::Excluded,
        ground_truth: Some(sample.truth.clone()),
    })
}

/// Generates `n_accept + n_reject` images under `dir/images/`, each with a
/// `.truth.json` sidecar, and returns a manifest with three unanimous
/// synthetic grades per image. Class order is shuffled by `seed` so ids
/// carry no label information.
pub fn build_synth_dataset(
    dir: &Path,
    n_accept: usize,
    n_reject: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<BinaryClass> = std::iter::repeat_n(BinaryClass::Accept, n_accept)
        .chain(std::iter::repeat_n(BinaryClass::Reject, n_reject))
        .collect();
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    let jobs: Vec<(BinaryClass, u64)> = classes.into_iter().map(|c| (c, rng.random())).collect();
    let entries = jobs
        .into_par_iter()
        .enumerate()
        .map(|(i, (class, s))| {
            let sample = generate_sample(profile, class, s)?;
            if sample.truth.class != class {
                return Err(Error::Consistency(format!("image {i}: oracle disagrees with requested class")));
            }
            entry_for(dir, format!("img-{i:05}"), i, &sample, [class; 3])
        })
        .collect::<Result<Vec<_>>>()?;
    for e in &entries {
        let oracle = e.ground_truth.as_ref().map(|t| Consensus::from(t.class));
        if Some(e.consensus) != oracle {
            return Err(Error::Consistency(format!("{}: consensus differs from rule oracle", e.image_id)));
        }
    }
    DatasetManifest::new(entries)
}

/// Appends `k` borderline images with split-vote grades (the majority
/// follows the rule oracle), so each has consensus `ambiguous`.
pub fn make_ambiguous_variants(
    manifest: &DatasetManifest,
    dir: &Path,
    k: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5_a5a5_a5a5);
    let seeds: Vec<u64> = (0..k).map(|_| rng.random()).collect();
    let start = manifest.entries.len();
    let new_entries = seeds
        .into_par_iter()
        .enumerate()
        .map(|(j, s)| {
            let sample = generate_ambiguous(profile, s)?;
            let majority = sample.truth.class;
            let labels = [majority, majority, majority.flip()];
            let index = start + j;
            let e = entry_for(dir, format!("img-{index:05}"), index, &sample, labels)?;
            if e.consensus != Consensus::Ambiguous {
                return Err(Error::Consistency(format!("{} is not ambiguous", e.image_id)));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = manifest.clone();
    out.entries.extend(new_entries);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthProfile {
        SynthProfile::with_side(96)
    }

    #[test]
    fn samples_match_requested_class() {
        for (i, class) in [BinaryClass::Accept, BinaryClass::Reject].into_iter().enumerate() {
            for s in 0..4 {
                let sample = generate_sample(&small(), class, 100 * i as u64 + s).unwrap();
                assert_eq!(sample.truth.class, class);
                let regraded = rule_grade(&sample.truth.rule_input(), sample.truth.spec.field_type).unwrap();
                assert_eq!(regraded, sample.truth.grade);
            }
        }
    }

    #[test]
    fn impossible_ranges_are_generation_error() {
        let mut p = small();
        p.accept.visibility_near_fovea = Range::new(0.1, 0.2);
        p.accept.fine_vessels_probability = 0.0;
        assert!(matches!(
            generate_sample(&p, BinaryClass::Accept, 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn preset_proportions() {
        let p = ImbalancePreset::for_total(800);
        assert_eq!((p.accept, p.reject, p.ambiguous), (752, 32, 16));
        assert_eq!(ImbalancePreset::for_total(0).accept, 0);
    }

    #[test]
    fn dataset_is_deterministic_and_labelled() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_synth_dataset(d1.path(), 3, 2, 5, &small()).unwrap();
        let m2 = build_synth_dataset(d2.path(), 3, 2, 5, &small()).unwrap();
        assert_eq!(m1.to_json().unwrap(), m2.to_json().unwrap());
        assert_eq!(m1.count(Consensus::Accept), 3);
        assert_eq!(m1.count(Consensus::Reject), 2);
        let e = &m1.entries[0];
        let a = std::fs::read(d1.path().join(&e.path)).unwrap();
        let b = std::fs::read(d2.path().join(&e.path)).unwrap();
        assert_eq!(a, b);
        assert!(d1.path().join(format!("images/{}.truth.json", e.image_id)).exists());

        let m3 = make_ambiguous_variants(&m1, d1.path(), 2, 5, &small()).unwrap();
        assert_eq!(m3.entries.len(), 7);
        assert_eq!(m3.count(Consensus::Ambiguous), 2);
        assert_eq!(&m3.entries[..5], &m1.entries[..]);
        assert_eq!(make_ambiguous_variants(&m1, d1.path(), 0, 5, &small()).unwrap(), m1);
    }
}
