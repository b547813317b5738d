//! Synthetic fundus images with known geometry, and the rule oracle that
//! labels them.
//!
//! Distances are measured in disc diameters (DD). "Edge" means the edge of
//! the circular field of view, which is what remains after cropping.

mod build;
mod render;

pub use build::{
    build_synth_dataset, generate_sample, make_ambiguous_variants, sample_spec, ClassProfile, ImbalancePreset,
    Range, SynthProfile, SynthSample, SYNTH_GRADERS,
};
pub use render::{degrade, render, FOV_RADIUS_FRACTION};

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryClass;
use crate::error::{Error, Result};

/// Visibility fractions above this count as "vessels visible".
pub const VISIBILITY_CUTOFF: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    MaculaCentered,
    DiscCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityGrade {
    Inadequate,
    Adequate,
    Good,
}

impl QualityGrade {
    pub fn class(self) -> BinaryClass {
        match self {
            Self::Good | Self::Adequate => BinaryClass::Accept,
            Self::Inadequate => BinaryClass::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradations {
    pub blur_sigma: f64,
    pub brightness_scale: f64,
    pub contrast_scale: f64,
}

impl Default for Degradations {
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            brightness_scale: 1.0,
            contrast_scale: 1.0,
        }
    }
}

impl Degradations {
    pub fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0 && self.brightness_scale == 1.0 && self.contrast_scale == 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub side: usize,
    pub field_type: FieldType,
    /// Defines 1 DD.
    pub disc_diameter_px: f64,
    pub disc_center: (f64, f64),
    pub fovea_center: (f64, f64),
    /// Fraction of the field of view where vessels are resolvable.
    pub vessel_visibility_global: f64,
    /// Same, restricted to within 1 DD of the fovea.
    pub vessel_visibility_near_fovea: f64,
    pub fine_vessels_on_disc: bool,
    pub degradations: Degradations,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.side < 16 {
            return bad(format!("image side {} is below 16 px", self.side));
        }
        if !(self.disc_diameter_px > 0.0 && self.disc_diameter_px.is_finite()) {
            return bad(format!("disc diameter {} must be positive", self.disc_diameter_px));
        }
        let s = self.side as f64;
        for (name, (x, y)) in [("disc", self.disc_center), ("fovea", self.fovea_center)] {
            if !(0.0..s).contains(&x) || !(0.0..s).contains(&y) {
                return bad(format!("{name} center ({x}, {y}) outside the {0}x{0} image", self.side));
            }
        }
        for (name, v) in [
            ("global visibility", self.vessel_visibility_global),
            ("near-fovea visibility", self.vessel_visibility_near_fovea),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        let d = &self.degradations;
        if !(d.blur_sigma >= 0.0 && d.blur_sigma.is_finite()) {
            return bad(format!("blur sigma {} must be >= 0", d.blur_sigma));
        }
        if !(d.brightness_scale > 0.0 && d.brightness_scale.is_finite()) {
            return bad(format!("brightness scale {} must be > 0", d.brightness_scale));
        }
        if !(d.contrast_scale > 0.0 && d.contrast_scale.is_finite()) {
            return bad(format!("contrast scale {} must be > 0", d.contrast_scale));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        let h = self.side as f64 / 2.0;
        (h, h)
    }

    pub fn fov_radius(&self) -> f64 {
        FOV_RADIUS_FRACTION * self.side as f64
    }

    /// Distance from `p` to the image center, in DD.
    pub fn center_distance_dd(&self, p: (f64, f64)) -> f64 {
        let c = self.center();
        (p.0 - c.0).hypot(p.1 - c.1) / self.disc_diameter_px
    }

    /// Distance from `p` to the nearest point of the field-of-view edge, in
    /// DD. Negative outside the field.
    pub fn edge_distance_dd(&self, p: (f64, f64)) -> f64 {
        let c = self.center();
        (self.fov_radius() - (p.0 - c.0).hypot(p.1 - c.1)) / self.disc_diameter_px
    }

    /// Rule inputs straight from the spec, using requested visibilities.
    pub fn rule_input(&self) -> RuleInput {
        RuleInput {
            fovea_center_dd: Some(self.center_distance_dd(self.fovea_center)),
            fovea_edge_dd: Some(self.edge_distance_dd(self.fovea_center)),
            disc_center_dd: Some(self.center_distance_dd(self.disc_center)),
            disc_edge_dd: Some(self.edge_distance_dd(self.disc_center)),
            vessel_visibility_global: Some(self.vessel_visibility_global),
            vessel_visibility_near_fovea: Some(self.vessel_visibility_near_fovea),
            fine_vessels_on_disc: Some(self.fine_vessels_on_disc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub fovea_center_dd: f64,
    pub fovea_edge_dd: f64,
    pub disc_center_dd: f64,
    pub disc_edge_dd: f64,
    /// Visibility fractions as actually rendered.
    pub realized_visibility_global: f64,
    pub realized_visibility_near_fovea: f64,
    pub grade: QualityGrade,
    pub class: BinaryClass,
}

impl GroundTruth {
    pub fn rule_input(&self) -> RuleInput {
        RuleInput {
            fovea_center_dd: Some(self.fovea_center_dd),
            fovea_edge_dd: Some(self.fovea_edge_dd),
            disc_center_dd: Some(self.disc_center_dd),
            disc_edge_dd: Some(self.disc_edge_dd),
            vessel_visibility_global: Some(self.realized_visibility_global),
            vessel_visibility_near_fovea: Some(self.realized_visibility_near_fovea),
            fine_vessels_on_disc: Some(self.spec.fine_vessels_on_disc),
        }
    }
}

/// Inputs of [`rule_grade`]. Only the fields used by the field type are
/// required.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleInput {
    pub fovea_center_dd: Option<f64>,
    pub fovea_edge_dd: Option<f64>,
    pub disc_center_dd: Option<f64>,
    pub disc_edge_dd: Option<f64>,
    pub vessel_visibility_global: Option<f64>,
    pub vessel_visibility_near_fovea: Option<f64>,
    pub fine_vessels_on_disc: Option<bool>,
}

fn need<V>(v: Option<V>, name: &str) -> Result<V> {
    v.ok_or_else(|| Error::Input(format!("rule input is missing {name}")))
}

/// Quality grade by the screening rules, checking good, then adequate.
///
/// Macula-centred: good needs the fovea within 1 DD of the image center and
/// vessels visible both near the fovea and across the field; adequate needs
/// the fovea more than 2 DD from the edge and vessels visible near it.
/// Disc-centred: good needs the disc within 1 DD of center, fine vessels on
/// the disc and vessels across the field; adequate needs the whole disc more
/// than 2 DD from the edge (its center more than 2.5 DD) and fine vessels.
pub fn rule_grade(input: &RuleInput, field_type: FieldType) -> Result<QualityGrade> {
    let global = need(input.vessel_visibility_global, "vessel_visibility_global")?;
    let across = global > VISIBILITY_CUTOFF;
    let grade = match field_type {
        FieldType::MaculaCentered => {
            let center = need(input.fovea_center_dd, "fovea_center_dd")?;
            let edge = need(input.fovea_edge_dd, "fovea_edge_dd")?;
            let near = need(input.vessel_visibility_near_fovea, "vessel_visibility_near_fovea")? > VISIBILITY_CUTOFF;
            if center <= 1.0 && near && across {
                QualityGrade::Good
            } else if edge > 2.0 && near {
                QualityGrade::Adequate
            } else {
                QualityGrade::Inadequate
            }
        }
        FieldType::DiscCentered => {
            let center = need(input.disc_center_dd, "disc_center_dd")?;
            let edge = need(input.disc_edge_dd, "disc_edge_dd")?;
            let fine = need(input.fine_vessels_on_disc, "fine_vessels_on_disc")?;
            if center <= 1.0 && fine && across {
                QualityGrade::Good
            } else if edge - 0.5 > 2.0 && fine {
                QualityGrade::Adequate
            } else {
                QualityGrade::Inadequate
            }
        }
    };
    Ok(grade)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn macula(center: f64, edge: f64, near: f64, global: f64) -> RuleInput {
        RuleInput {
            fovea_center_dd: Some(center),
            fovea_edge_dd: Some(edge),
            vessel_visibility_near_fovea: Some(near),
            vessel_visibility_global: Some(global),
            ..Default::default()
        }
    }

    #[test]
    fn tabulated_macula_examples() {
        let m = FieldType::MaculaCentered;
        assert_eq!(rule_grade(&macula(0.5, 3.0, 0.95, 0.95), m).unwrap(), QualityGrade::Good);
        assert_eq!(rule_grade(&macula(1.03, 2.5, 0.95, 0.6), m).unwrap(), QualityGrade::Adequate);
        assert_eq!(rule_grade(&macula(2.5, 1.0, 0.95, 0.95), m).unwrap(), QualityGrade::Inadequate);
    }

    #[test]
    fn boundaries_are_as_written() {
        let m = FieldType::MaculaCentered;
        assert_eq!(rule_grade(&macula(1.0, 2.5, 0.95, 0.95), m).unwrap(), QualityGrade::Good);
        assert_eq!(rule_grade(&macula(1.5, 2.0, 0.95, 0.95), m).unwrap(), QualityGrade::Inadequate);
        assert_eq!(rule_grade(&macula(0.5, 3.0, 0.9, 0.95), m).unwrap(), QualityGrade::Inadequate);
    }

    #[test]
    fn disc_rules() {
        let d = FieldType::DiscCentered;
        let input = |center: f64, edge: f64, fine: bool, global: f64| RuleInput {
            disc_center_dd: Some(center),
            disc_edge_dd: Some(edge),
            fine_vessels_on_disc: Some(fine),
            vessel_visibility_global: Some(global),
            ..Default::default()
        };
        assert_eq!(rule_grade(&input(0.5, 3.0, true, 0.95), d).unwrap(), QualityGrade::Good);
        assert_eq!(rule_grade(&input(0.5, 3.0, true, 0.5), d).unwrap(), QualityGrade::Adequate);
        assert_eq!(rule_grade(&input(1.2, 2.4, true, 0.95), d).unwrap(), QualityGrade::Inadequate);
        assert_eq!(rule_grade(&input(0.5, 3.0, false, 0.95), d).unwrap(), QualityGrade::Inadequate);
    }

    #[test]
    fn missing_field_is_input_error() {
        let r = rule_grade(&RuleInput::default(), FieldType::MaculaCentered);
        assert!(matches!(r, Err(Error::Input(_))));
        let partial = macula(0.5, 3.0, 0.95, 0.95);
        assert!(rule_grade(&partial, FieldType::DiscCentered).is_err());
    }

    #[test]
    fn class_mapping() {
        assert_eq!(QualityGrade::Good.class(), BinaryClass::Accept);
        assert_eq!(QualityGrade::Adequate.class(), BinaryClass::Accept);
        assert_eq!(QualityGrade::Inadequate.class(), BinaryClass::Reject);
    }
}
